//! Non-destructive edit bundles: per-position (layer, dW) entries stored
//! beside a frozen base checkpoint, never merged into it.
//!
//! File layout ("GRBD", little-endian):
//!   magic | u32 version | 32-byte base checkpoint sha256 | u32 entry count
//!   | per entry: u32 position, u32 layer, f64 lambda, u32 m,
//!     u32 rows, u32 cols, f32 payload.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::num::Scalar;

pub const BUNDLE_MAGIC: &[u8; 4] = b"GRBD";
const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct EditEntry<S> {
    pub layer: usize,
    pub lambda: f64,
    /// Number of stacked edit requests behind this update.
    pub m: usize,
    /// d_model x d_ff additive update to the layer's W_out.
    pub delta_w: Matrix<S>,
}

/// Map position -> edit entry, tied to a base checkpoint by hash.
#[derive(Clone, Debug)]
pub struct EditBundle<S> {
    pub base_checkpoint_hash: [u8; 32],
    entries: BTreeMap<usize, EditEntry<S>>,
}

pub fn sha256_file(path: &Path) -> Result<[u8; 32]> {
    let bytes =
        std::fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().into())
}

impl<S: Scalar> EditBundle<S> {
    pub fn new(base_checkpoint_hash: [u8; 32]) -> Self {
        EditBundle { base_checkpoint_hash, entries: BTreeMap::new() }
    }

    pub fn entries(&self) -> &BTreeMap<usize, EditEntry<S>> {
        &self.entries
    }

    pub fn entry(&self, position: usize) -> Option<&EditEntry<S>> {
        self.entries.get(&position)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Insert or replace the entry for a position, validating the shape
    /// against the target model.
    pub fn install(
        &mut self,
        model: &Model<S>,
        position: usize,
        entry: EditEntry<S>,
    ) -> Result<()> {
        if entry.layer >= model.cfg.n_dec_layers {
            return Err(CoreError::input(format!(
                "edit layer {} outside decoder depth {}",
                entry.layer, model.cfg.n_dec_layers
            )));
        }
        let w_out = &model.params.dec_layers[entry.layer].ffn.w_out;
        if entry.delta_w.rows() != w_out.rows() || entry.delta_w.cols() != w_out.cols() {
            return Err(CoreError::input(format!(
                "dW shape {}x{} does not match W_out {}x{}",
                entry.delta_w.rows(),
                entry.delta_w.cols(),
                w_out.rows(),
                w_out.cols()
            )));
        }
        if !entry.delta_w.is_finite() {
            return Err(CoreError::numerical("dW contains non-finite entries"));
        }
        self.entries.insert(position, entry);
        Ok(())
    }

    pub fn remove(&mut self, position: usize) -> Option<EditEntry<S>> {
        self.entries.remove(&position)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file =
            std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io = |e| CoreError::io(path.display().to_string(), e);
        w.write_all(BUNDLE_MAGIC).map_err(io)?;
        w.write_all(&BUNDLE_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.base_checkpoint_hash).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (pos, entry) in &self.entries {
            w.write_all(&(*pos as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(entry.layer as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&entry.lambda.to_le_bytes()).map_err(io)?;
            w.write_all(&(entry.m as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(entry.delta_w.rows() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(entry.delta_w.cols() as u32).to_le_bytes()).map_err(io)?;
            let mut payload = Vec::with_capacity(entry.delta_w.data().len() * 4);
            for x in entry.delta_w.data() {
                payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
            w.write_all(&payload).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Load a bundle and verify it matches the base checkpoint file.
    pub fn load(path: &Path, base_checkpoint: &Path) -> Result<Self> {
        let expected = sha256_file(base_checkpoint)?;
        let bundle = Self::load_unchecked(path)?;
        if bundle.base_checkpoint_hash != expected {
            return Err(CoreError::data(format!(
                "bundle {} was built for a different base checkpoint than {}",
                path.display(),
                base_checkpoint.display()
            )));
        }
        Ok(bundle)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io = |e| CoreError::io(path.display().to_string(), e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != BUNDLE_MAGIC {
            return Err(CoreError::format(path.display().to_string(), "bad magic bytes"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != BUNDLE_VERSION {
            return Err(CoreError::format(
                path.display().to_string(),
                format!("unsupported bundle version {version}"),
            ));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(io)?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let n_entries = u32::from_le_bytes(u32buf) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n_entries {
            let read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32> {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|e| CoreError::io(path.display().to_string(), e))?;
                Ok(u32::from_le_bytes(b))
            };
            let pos = read_u32(&mut r)? as usize;
            let layer = read_u32(&mut r)? as usize;
            let mut f64buf = [0u8; 8];
            r.read_exact(&mut f64buf).map_err(io)?;
            let lambda = f64::from_le_bytes(f64buf);
            let m = read_u32(&mut r)? as usize;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut payload = vec![0u8; rows * cols * 4];
            r.read_exact(&mut payload).map_err(io)?;
            let data: Vec<S> = payload
                .chunks_exact(4)
                .map(|c| S::cast(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            entries
                .insert(pos, EditEntry { layer, lambda, m, delta_w: Matrix::from_vec(rows, cols, data) });
        }
        Ok(EditBundle { base_checkpoint_hash: hash, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{save_checkpoint, ModelConfig};

    fn small_model() -> Model<f32> {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            d_ff: 8,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            max_seq_len: 6,
            ..ModelConfig::default()
        };
        Model::new(cfg).unwrap()
    }

    #[test]
    fn install_validates_shapes() {
        let model = small_model();
        let mut bundle = EditBundle::new([0u8; 32]);
        let bad = EditEntry { layer: 0, lambda: 1.0, m: 1, delta_w: Matrix::zeros(3, 3) };
        assert!(bundle.install(&model, 0, bad).is_err());
        let good = EditEntry { layer: 5, lambda: 1.0, m: 1, delta_w: Matrix::zeros(8, 8) };
        assert!(bundle.install(&model, 0, good).is_err(), "layer out of depth");
        let ok = EditEntry { layer: 1, lambda: 1.0, m: 1, delta_w: Matrix::zeros(8, 8) };
        bundle.install(&model, 0, ok).unwrap();
        assert_eq!(bundle.len(), 1);
    }

    #[test]
    fn roundtrip_and_hash_verification() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("base.ckpt");
        let model = small_model();
        save_checkpoint(&model, &ckpt).unwrap();
        let hash = sha256_file(&ckpt).unwrap();
        let mut bundle: EditBundle<f32> = EditBundle::new(hash);
        let dw = Matrix::from_fn(8, 8, |i, j| (i * 8 + j) as f32 * 0.01);
        bundle
            .install(&model, 2, EditEntry { layer: 1, lambda: 123.0, m: 7, delta_w: dw })
            .unwrap();
        let bpath = dir.path().join("bundle.bin");
        bundle.save(&bpath).unwrap();
        let loaded: EditBundle<f32> = EditBundle::load(&bpath, &ckpt).unwrap();
        assert_eq!(loaded.len(), 1);
        let e = loaded.entry(2).unwrap();
        assert_eq!(e.layer, 1);
        assert_eq!(e.m, 7);
        assert_eq!(e.lambda, 123.0);
        assert_eq!(e.delta_w, bundle.entry(2).unwrap().delta_w);

        // Tampered base checkpoint must be rejected.
        let other = dir.path().join("other.ckpt");
        let mut m2 = small_model();
        m2.params.lm_head.set(0, 0, 42.0);
        save_checkpoint(&m2, &other).unwrap();
        assert!(EditBundle::<f32>::load(&bpath, &other).is_err());
    }
}
