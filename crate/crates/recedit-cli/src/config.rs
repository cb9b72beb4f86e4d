//! Run configuration: TOML sections with documented defaults, overridable
//! from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use recedit_core::pipeline::PipelineParams;
use recedit_core::synthetic::SyntheticSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// "synthetic" generates into the run directory; "jsonl" reads `path`.
    pub source: String,
    pub path: Option<PathBuf>,
    /// Optional precomputed item embeddings (CSV: item_id, d_emb floats).
    pub embeddings_csv: Option<PathBuf>,
    /// Seed for synthetic generation.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { source: "synthetic".into(), path: None, embeddings_csv: None, seed: 42 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub synthetic: SyntheticSpec,
    #[serde(flatten)]
    pub pipeline: PipelineParams,
    /// Worker threads; zero uses every core.
    pub threads: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    /// Re-derive every per-stage seed from one master seed.
    pub fn apply_master_seed(&mut self, seed: u64) {
        self.pipeline.tokenizer.seed = seed.wrapping_add(1);
        self.pipeline.model.seed = seed.wrapping_add(2);
        self.pipeline.train.seed = seed.wrapping_add(3);
        self.pipeline.probe.seed = seed.wrapping_add(4);
        self.pipeline.edit.seed = seed.wrapping_add(5);
        self.pipeline.eval.seed = seed.wrapping_add(6);
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.source.as_str() {
            "synthetic" => {}
            "jsonl" => {
                if self.dataset.path.is_none() {
                    bail!("dataset.source = \"jsonl\" requires dataset.path");
                }
            }
            other => bail!("unknown dataset.source {other:?} (use \"synthetic\" or \"jsonl\")"),
        }
        if self.pipeline.eval.beam_width < self.pipeline.eval.top_k {
            bail!(
                "eval.beam_width ({}) must be >= eval.top_k ({})",
                self.pipeline.eval.beam_width,
                self.pipeline.eval.top_k
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.pipeline.tokenizer.m, 4);
        assert_eq!(back.pipeline.eval.beam_width, 20);
        assert_eq!(back.synthetic.n_items, 2000);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let text = r#"
[dataset]
source = "synthetic"

[tokenizer]
k = 32

[train]
epochs = 1
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.pipeline.tokenizer.k, 32);
        assert_eq!(cfg.pipeline.tokenizer.m, 4, "default");
        assert_eq!(cfg.pipeline.train.epochs, 1);
        cfg.validate().unwrap();
    }

    #[test]
    fn master_seed_rewrites_stage_seeds() {
        let mut cfg = RunConfig::default();
        cfg.apply_master_seed(100);
        assert_eq!(cfg.pipeline.model.seed, 102);
        assert_eq!(cfg.pipeline.eval.seed, 106);
    }
}
