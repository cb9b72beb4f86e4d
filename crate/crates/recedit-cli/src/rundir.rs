//! Run-directory layout and the per-command artifact manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("ckpt"))
            .with_context(|| format!("creating run dir {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            bail!("run directory {} does not exist (run gen-data or tokenize first)", root.display());
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn sids(&self) -> PathBuf {
        self.root.join("sids.tsv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("ckpt").join("base.ckpt")
    }

    pub fn loss_trace(&self) -> PathBuf {
        self.root.join("train-loss.csv")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }

    pub fn requests(&self) -> PathBuf {
        self.root.join("requests.jsonl")
    }

    pub fn probes(&self) -> PathBuf {
        self.root.join("probes.jsonl")
    }

    pub fn layer_table(&self) -> PathBuf {
        self.root.join("layers.txt")
    }

    pub fn bundle(&self) -> PathBuf {
        self.root.join("bundle.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn metrics_named(&self, tag: &str) -> PathBuf {
        self.root.join(format!("metrics-{tag}.csv"))
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.csv")
    }

    pub fn recommendations(&self) -> PathBuf {
        self.root.join("recommendations.jsonl")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    /// Exit-code-3 style prerequisite check.
    pub fn require(&self, path: &Path, produced_by: &str) -> Result<()> {
        if !path.exists() {
            bail!(
                "missing prerequisite artifact {} (run `recedit {produced_by}` first)",
                path.display()
            );
        }
        Ok(())
    }
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

pub fn sha256_hex_str(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One manifest line per command run: the resolved config hash plus a hash
/// of every artifact consumed and produced. Timing files are recorded
/// without hashes (wall-clock is not reproducible).
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub unhashed_outputs: Vec<String>,
}

impl ManifestEntry {
    pub fn new(command: &str, config_sha256: String) -> Self {
        ManifestEntry {
            command: command.to_string(),
            config_sha256,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            unhashed_outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(display_name(path), sha256_hex(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(display_name(path), sha256_hex(path)?);
        Ok(())
    }

    pub fn unhashed_output(&mut self, path: &Path) {
        self.unhashed_outputs.push(display_name(path));
    }

    pub fn append_to(&self, manifest_path: &Path) -> Result<()> {
        use std::io::Write;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(manifest_path)
            .with_context(|| format!("opening manifest {}", manifest_path.display()))?;
        writeln!(file, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

fn display_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| {
        path.display().to_string()
    })
}
