//! Update-cost comparison: retrain vs finetune vs edit.
//!
//! All arms are timed from the same starting point (knowledge construction
//! already done) to an updated model, run sequentially under the same
//! thread budget. A failed arm is recorded and the others proceed.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::editor::{run_edit_pipeline, EditBundle, EditPipelineConfig, EditTiming, TokenizedRequest};
use crate::error::Result;
use crate::model::{train, Model, TrainConfig, TrainExample};
use crate::num::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Finetune arm: fraction of the base learning rate.
    pub finetune_lr_scale: f64,
    pub finetune_epochs: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { finetune_lr_scale: 0.1, finetune_epochs: 3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingRow {
    pub arm: String,
    pub phase: String,
    pub seconds: f64,
    /// Arm total / retrain total; NaN when the retrain arm failed.
    pub relative: f64,
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("arm,phase,seconds,relative\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.4},{:.4}\n", r.arm, r.phase, r.seconds, r.relative));
    }
    out
}

pub struct ArmOutcome<T> {
    pub result: std::result::Result<T, String>,
    pub seconds: f64,
}

pub struct CompareOutcome<S> {
    pub retrain: ArmOutcome<Model<S>>,
    pub finetune: ArmOutcome<Model<S>>,
    pub edit: ArmOutcome<EditBundle<S>>,
    pub edit_timing: EditTiming,
    pub timings: Vec<TimingRow>,
}

/// Run the three update arms. `train_corpus` is the original training data,
/// `pseudo_corpus` the synthesized cold-item sequences (already tokenized).
#[allow(clippy::too_many_arguments)]
pub fn compare_update_cost<S: Scalar>(
    base: &Model<S>,
    base_hash: [u8; 32],
    train_corpus: &[TrainExample],
    pseudo_corpus: &[TrainExample],
    train_cfg: &TrainConfig,
    requests: &[TokenizedRequest],
    layer_choices: &BTreeMap<usize, usize>,
    covariance_contexts: &[(Vec<usize>, Vec<usize>)],
    edit_cfg: &EditPipelineConfig,
    cfg: &CompareConfig,
) -> Result<CompareOutcome<S>> {
    // Retrain: from scratch on train + pseudo with identical hyperparameters.
    let t0 = Instant::now();
    let retrain_result = (|| -> Result<Model<S>> {
        let mut model = Model::new(base.cfg.clone())?;
        let mut corpus = train_corpus.to_vec();
        corpus.extend_from_slice(pseudo_corpus);
        train(&mut model, &corpus, train_cfg)?;
        Ok(model)
    })();
    let retrain_seconds = t0.elapsed().as_secs_f64();

    // Finetune: continue from the base on pseudo data only, smaller lr.
    let t0 = Instant::now();
    let finetune_result = (|| -> Result<Model<S>> {
        let mut model = base.clone();
        let ft_cfg = TrainConfig {
            lr: train_cfg.lr * cfg.finetune_lr_scale,
            epochs: cfg.finetune_epochs,
            max_examples_per_epoch: 0,
            ..train_cfg.clone()
        };
        train(&mut model, pseudo_corpus, &ft_cfg)?;
        Ok(model)
    })();
    let finetune_seconds = t0.elapsed().as_secs_f64();

    // Edit: the full locate-free pipeline (layers already chosen).
    let t0 = Instant::now();
    let mut edit_timing = EditTiming::default();
    let edit_result = run_edit_pipeline(
        base,
        base_hash,
        requests,
        layer_choices,
        covariance_contexts,
        edit_cfg,
    )
    .map(|(bundle, timing, _)| {
        edit_timing = timing;
        bundle
    });
    let edit_seconds = t0.elapsed().as_secs_f64();

    let denom = if retrain_result.is_ok() { retrain_seconds } else { f64::NAN };
    let mut timings = vec![
        TimingRow {
            arm: "retrain".into(),
            phase: "train".into(),
            seconds: retrain_seconds,
            relative: retrain_seconds / denom,
        },
        TimingRow {
            arm: "finetune".into(),
            phase: "train".into(),
            seconds: finetune_seconds,
            relative: finetune_seconds / denom,
        },
        TimingRow {
            arm: "edit".into(),
            phase: "delta".into(),
            seconds: edit_timing.delta_seconds,
            relative: edit_timing.delta_seconds / denom,
        },
        TimingRow {
            arm: "edit".into(),
            phase: "covariance".into(),
            seconds: edit_timing.covariance_seconds,
            relative: edit_timing.covariance_seconds / denom,
        },
        TimingRow {
            arm: "edit".into(),
            phase: "solve".into(),
            seconds: edit_timing.solve_seconds,
            relative: edit_timing.solve_seconds / denom,
        },
    ];
    timings.push(TimingRow {
        arm: "edit".into(),
        phase: "total".into(),
        seconds: edit_seconds,
        relative: edit_seconds / denom,
    });

    Ok(CompareOutcome {
        retrain: ArmOutcome {
            result: retrain_result.map_err(|e| e.to_string()),
            seconds: retrain_seconds,
        },
        finetune: ArmOutcome {
            result: finetune_result.map_err(|e| e.to_string()),
            seconds: finetune_seconds,
        },
        edit: ArmOutcome { result: edit_result.map_err(|e| e.to_string()), seconds: edit_seconds },
        edit_timing,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig, Precision};

    #[test]
    fn edit_arm_is_faster_than_retrain() {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 16,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            max_seq_len: 10,
            activation: Activation::GatedSilu,
            precision: Precision::Fp32,
            seed: 1,
        };
        let base: Model<f32> = Model::new(cfg).unwrap();
        let corpus: Vec<TrainExample> = (0..64)
            .map(|i| TrainExample {
                history: vec![4 + (i % 8)],
                decoder: vec![1, 4 + ((i + 1) % 8)],
                targets: vec![4 + ((i + 1) % 8), 12 + (i % 4)],
            })
            .collect();
        let pseudo: Vec<TrainExample> = corpus[..8].to_vec();
        let requests = vec![TokenizedRequest {
            position: 1,
            history: vec![4],
            decoder: vec![1, 5],
            target: 13,
        }];
        let mut choices = BTreeMap::new();
        choices.insert(1usize, 1usize);
        let contexts: Vec<(Vec<usize>, Vec<usize>)> =
            corpus.iter().take(8).map(|e| (e.history.clone(), e.decoder.clone())).collect();
        let train_cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            max_examples_per_epoch: 0,
            ..TrainConfig::default()
        };
        let out = compare_update_cost(
            &base,
            [0u8; 32],
            &corpus,
            &pseudo,
            &train_cfg,
            &requests,
            &choices,
            &contexts,
            &EditPipelineConfig { covariance_samples: 8, ..EditPipelineConfig::default() },
            &CompareConfig::default(),
        )
        .unwrap();
        assert!(out.retrain.result.is_ok());
        assert!(out.finetune.result.is_ok());
        assert!(out.edit.result.is_ok());
        assert!(
            out.edit.seconds < out.retrain.seconds,
            "edit {}s vs retrain {}s",
            out.edit.seconds,
            out.retrain.seconds
        );
        let csv = timing_csv(&out.timings);
        assert!(csv.lines().count() >= 6);
    }
}
