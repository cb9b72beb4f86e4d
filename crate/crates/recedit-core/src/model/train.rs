//! Next-token training with Adam and deterministic batch order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::num::Scalar;

use super::params::ModelParams;
use super::Model;

/// One training example: encoder tokens plus decoder input/target tokens.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub history: Vec<usize>,
    pub decoder: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables.
    pub grad_clip: f64,
    /// Cap on examples per epoch (deterministic subsample); zero = all.
    pub max_examples_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: 1.0,
            max_examples_per_epoch: 9000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean nats/token per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub examples_seen: usize,
    pub seconds: f64,
}

struct AdamState<S> {
    m: ModelParams<S>,
    v: ModelParams<S>,
    t: usize,
}

fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &mut ModelParams<S>,
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bias1 = 1.0 - b1.powi(state.t as i32);
    let bias2 = 1.0 - b2.powi(state.t as i32);
    let lr = cfg.lr;
    let eps = cfg.eps;

    // Optional global-norm clip.
    if cfg.grad_clip > 0.0 {
        let mut sq = 0.0f64;
        for (_, g) in grads.tensors_mut() {
            for x in g.iter() {
                let v = x.as_f64();
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        if norm > cfg.grad_clip {
            let scale = S::cast(cfg.grad_clip / norm);
            for (_, g) in grads.tensors_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }

    let mut p_t = params.tensors_mut();
    let mut g_t = grads.tensors_mut();
    let mut m_t = state.m.tensors_mut();
    let mut v_t = state.v.tensors_mut();
    debug_assert_eq!(p_t.len(), g_t.len());
    for i in 0..p_t.len() {
        let p = &mut p_t[i].1;
        let g = &mut g_t[i].1;
        let m = &mut m_t[i].1;
        let v = &mut v_t[i].1;
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = S::cast(mj);
            v[j] = S::cast(vj);
            let update = lr * (mj / bias1) / ((vj / bias2).sqrt() + eps);
            p[j] = p[j] - S::cast(update);
        }
    }
}

/// Train in place. Deterministic for a fixed seed regardless of thread
/// count: per-example gradients are computed in parallel but reduced in
/// example order.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    corpus: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(CoreError::input("training corpus is empty"));
    }
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state =
        AdamState { m: model.params.zeros_like(), v: model.params.zeros_like(), t: 0 };
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        if cfg.max_examples_per_epoch > 0 && order.len() > cfg.max_examples_per_epoch {
            order.truncate(cfg.max_examples_per_epoch);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            // Per-example grads in parallel, reduced in deterministic order.
            let results: Vec<Result<(f64, usize, ModelParams<S>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let ex = &corpus[idx];
                    let mut grads = model.params.zeros_like();
                    let targets: Vec<Option<usize>> =
                        ex.targets.iter().map(|&t| Some(t)).collect();
                    let loss =
                        model.loss_and_grad(&ex.history, &ex.decoder, &targets, &mut grads)?;
                    Ok((loss, ex.targets.len(), grads))
                })
                .collect();
            let mut batch_grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, n_tokens, grads) = r?;
                if !loss.is_finite() {
                    return Err(CoreError::numerical(format!(
                        "non-finite loss at epoch {epoch} step {}",
                        report.steps
                    )));
                }
                batch_loss += loss * n_tokens as f64;
                epoch_tokens += n_tokens;
                let mut acc = batch_grads.tensors_mut();
                for (i, (_, _, g)) in grads.tensors().into_iter().enumerate() {
                    let dst = &mut acc[i].1;
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
            // Mean over the batch.
            let scale = S::cast(1.0 / batch.len() as f64);
            for (_, g) in batch_grads.tensors_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            adam_step(&mut model.params, &mut batch_grads, &mut state, cfg);
            epoch_loss += batch_loss;
            report.steps += 1;
            report.examples_seen += batch.len();
        }
        report.epoch_losses.push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
