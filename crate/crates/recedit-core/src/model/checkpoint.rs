//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "GRED" | u32 version | u32 config-text length | config kv text
//!   | u32 tensor count | per tensor: u32 name len, name, u32 ndim,
//!   u32 dims..., f32 row-major payload.
//!
//! Payloads are always fp32 on disk; loading into an fp64 model upcasts.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::num::Scalar;

use super::params::{ModelConfig, ModelParams};
use super::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GRED";
const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> CoreError {
    CoreError::io(path.display().to_string(), e)
}

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| io_err(path, e))?;
    write_u32(&mut w, CHECKPOINT_VERSION, path)?;
    let cfg_text = model.cfg.to_kv_text();
    write_u32(&mut w, cfg_text.len() as u32, path)?;
    w.write_all(cfg_text.as_bytes()).map_err(|e| io_err(path, e))?;
    let tensors = model.params.tensors();
    write_u32(&mut w, tensors.len() as u32, path)?;
    for (name, shape, data) in tensors {
        write_u32(&mut w, name.len() as u32, path)?;
        w.write_all(name.as_bytes()).map_err(|e| io_err(path, e))?;
        write_u32(&mut w, shape.len() as u32, path)?;
        for d in &shape {
            write_u32(&mut w, *d as u32, path)?;
        }
        let mut payload = Vec::with_capacity(data.len() * 4);
        for x in data {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&payload).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::format(path.display().to_string(), "bad magic bytes"));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::format(
            path.display().to_string(),
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let cfg_len = read_u32(&mut r, path)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf).map_err(|e| io_err(path, e))?;
    let cfg_text = String::from_utf8(cfg_buf)
        .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
    let cfg = ModelConfig::from_kv_text(&cfg_text)?;

    // Read every named tensor, then pour them into a freshly shaped params.
    let n_tensors = read_u32(&mut r, path)? as usize;
    let mut loaded: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut payload = vec![0u8; len * 4];
        r.read_exact(&mut payload).map_err(|e| io_err(path, e))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.insert(name, (shape, data));
    }

    let mut params: ModelParams<S> = ModelParams::init(&cfg);
    for (name, dst) in params.tensors_mut() {
        let (shape, data) = loaded.remove(&name).ok_or_else(|| {
            CoreError::format(path.display().to_string(), format!("missing tensor {name}"))
        })?;
        let expected: usize = shape.iter().product();
        if expected != dst.len() {
            return Err(CoreError::format(
                path.display().to_string(),
                format!("tensor {name} has {expected} values, expected {}", dst.len()),
            ));
        }
        for (d, s) in dst.iter_mut().zip(data) {
            *d = S::cast(s as f64);
        }
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.into_keys().collect();
        return Err(CoreError::format(
            path.display().to_string(),
            format!("unexpected tensors: {}", extra.join(", ")),
        ));
    }
    Model::from_params(cfg, params)
}
