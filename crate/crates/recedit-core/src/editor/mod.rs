//! Locate-then-edit core: value shifts, key statistics, closed-form solve,
//! and bundle assembly.

mod bundle;
mod delta;
mod solve;

pub use bundle::{sha256_file, EditBundle, EditEntry, BUNDLE_MAGIC};
pub use delta::{optimize_delta, optimize_delta_multi, DeltaOpts, DeltaResult};
pub use solve::{default_jitter, solve_update, symmetric_eigenvalues, EditSolveInput, SolveOutput};

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::num::Scalar;

/// Sum of key outer products from original training contexts at one
/// (position, layer) site: the preservation side of the normal equations.
#[derive(Clone, Debug)]
pub struct KeyMatrixStats {
    pub c0: Matrix<f64>,
    pub sample_count: usize,
    pub layer: usize,
    pub position: usize,
}

impl KeyMatrixStats {
    /// Largest symmetry defect |c_ij - c_ji|.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.c0.rows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.c0.get(i, j) - self.c0.get(j, i)).abs());
            }
        }
        worst
    }
}

/// An edit request lowered to token sequences: encoder history, decoder
/// input (BOS + SID prefix), and the digit token to inject.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizedRequest {
    pub position: usize,
    pub history: Vec<usize>,
    pub decoder: Vec<usize>,
    pub target: usize,
}

/// Capture keys at (layer, position) over training contexts and accumulate
/// C0 = sum k k^T in f64.
pub fn collect_covariance<S: Scalar>(
    model: &Model<S>,
    contexts: &[(Vec<usize>, Vec<usize>)],
    layer: usize,
    position: usize,
) -> Result<KeyMatrixStats> {
    if contexts.is_empty() {
        return Err(CoreError::input("covariance sample is empty"));
    }
    let keys: Vec<Result<Vec<S>>> = contexts
        .par_iter()
        .map(|(history, decoder)| {
            let caps = model.capture_activations(history, decoder, &[(layer, position)])?;
            Ok(caps.into_iter().next().expect("one capture").key)
        })
        .collect();
    let d_ff = model.cfg.d_ff;
    let mut c0 = Matrix::<f64>::zeros(d_ff, d_ff);
    let mut count = 0;
    for k in keys {
        let k = k?;
        let kf: Vec<f64> = k.iter().map(|x| x.as_f64()).collect();
        c0.acc_outer(&kf, &kf);
        count += 1;
    }
    Ok(KeyMatrixStats { c0, sample_count: count, layer, position })
}

/// Everything needed to solve one position's update for any lambda.
#[derive(Clone, Debug)]
pub struct PositionSolveData {
    pub position: usize,
    pub layer: usize,
    pub k1: Matrix<f64>,
    pub zprime1: Matrix<f64>,
    pub c0: KeyMatrixStats,
    pub m: usize,
    /// Mean target probability before/after delta optimization.
    pub mean_prob_before: f64,
    pub mean_prob_after: f64,
    /// Requests whose probability strictly improved.
    pub improved: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EditTiming {
    pub delta_seconds: f64,
    pub covariance_seconds: f64,
    pub solve_seconds: f64,
    pub total_seconds: f64,
    pub requests: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditPipelineConfig {
    pub lambda: f64,
    /// None picks the trace-scaled default per solve.
    pub jitter: Option<f64>,
    pub delta: DeltaOpts,
    /// Keys sampled per (position, layer) for C0.
    pub covariance_samples: usize,
    pub seed: u64,
}

impl Default for EditPipelineConfig {
    fn default() -> Self {
        EditPipelineConfig {
            lambda: 1000.0,
            jitter: None,
            delta: DeltaOpts::default(),
            covariance_samples: 2000,
            seed: 0,
        }
    }
}

/// Phase one: optimize every request's delta and collect key statistics.
/// The result is lambda-independent, so sweeps reuse it.
pub fn prepare_edit_data<S: Scalar>(
    model: &Model<S>,
    requests: &[TokenizedRequest],
    layer_choices: &BTreeMap<usize, usize>,
    covariance_contexts: &[(Vec<usize>, Vec<usize>)],
    cfg: &EditPipelineConfig,
) -> Result<(Vec<PositionSolveData>, EditTiming)> {
    let start = Instant::now();
    let mut timing = EditTiming::default();
    let mut by_position: BTreeMap<usize, Vec<&TokenizedRequest>> = BTreeMap::new();
    for req in requests {
        by_position.entry(req.position).or_default().push(req);
    }
    let mut out = Vec::new();
    for (&position, reqs) in &by_position {
        let layer = *layer_choices.get(&position).ok_or_else(|| {
            CoreError::input(format!("no edit layer chosen for position {position}"))
        })?;
        if layer >= model.cfg.n_dec_layers {
            return Err(CoreError::input(format!(
                "edit layer {layer} outside decoder depth"
            )));
        }

        let t0 = Instant::now();
        let results: Vec<Result<DeltaResult<S>>> = reqs
            .par_iter()
            .map(|req| {
                optimize_delta(model, &req.history, &req.decoder, layer, req.target, &cfg.delta)
            })
            .collect();
        timing.delta_seconds += t0.elapsed().as_secs_f64();

        let d_ff = model.cfg.d_ff;
        let d_model = model.cfg.d_model;
        let mut columns: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut prob_before = 0.0;
        let mut prob_after = 0.0;
        let mut improved = 0;
        for res in results {
            match res {
                Ok(r) => {
                    let key: Vec<f64> = r.key.iter().map(|x| x.as_f64()).collect();
                    let zprime: Vec<f64> = r
                        .original_value
                        .iter()
                        .zip(&r.delta)
                        .map(|(z, d)| z.as_f64() + d.as_f64())
                        .collect();
                    prob_before += r.initial_prob;
                    prob_after += r.final_prob;
                    if r.final_prob > r.initial_prob {
                        improved += 1;
                    }
                    columns.push((key, zprime));
                    timing.requests += 1;
                }
                Err(CoreError::Numerical(msg)) => {
                    // A diverged request is dropped, not fatal.
                    timing.skipped += 1;
                    eprintln!("skipping edit request at position {position}: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
        if columns.is_empty() {
            continue;
        }
        let m = columns.len();
        let mut k1 = Matrix::<f64>::zeros(d_ff, m);
        let mut zprime1 = Matrix::<f64>::zeros(d_model, m);
        for (j, (key, zp)) in columns.iter().enumerate() {
            for i in 0..d_ff {
                k1.set(i, j, key[i]);
            }
            for i in 0..d_model {
                zprime1.set(i, j, zp[i]);
            }
        }

        let t0 = Instant::now();
        let n_cov = cfg.covariance_samples.min(covariance_contexts.len()).max(1);
        let cov_slice: Vec<(Vec<usize>, Vec<usize>)> = covariance_contexts
            .iter()
            .take(n_cov)
            .filter(|(_, dec)| dec.len() > position)
            .cloned()
            .collect();
        if cov_slice.is_empty() {
            return Err(CoreError::input(format!(
                "no covariance contexts reach position {position}"
            )));
        }
        let c0 = collect_covariance(model, &cov_slice, layer, position)?;
        timing.covariance_seconds += t0.elapsed().as_secs_f64();

        out.push(PositionSolveData {
            position,
            layer,
            k1,
            zprime1,
            c0,
            m,
            mean_prob_before: prob_before / m as f64,
            mean_prob_after: prob_after / m as f64,
            improved,
        });
    }
    timing.total_seconds = start.elapsed().as_secs_f64();
    Ok((out, timing))
}

/// Phase two: closed-form solve per position and bundle assembly.
pub fn solve_bundle<S: Scalar>(
    model: &Model<S>,
    base_hash: [u8; 32],
    data: &[PositionSolveData],
    lambda: f64,
    jitter: Option<f64>,
) -> Result<(EditBundle<S>, f64, Vec<(usize, f64, f64)>)> {
    let start = Instant::now();
    let mut bundle = EditBundle::new(base_hash);
    let mut norms = Vec::new();
    for d in data {
        let w0 = model.params.dec_layers[d.layer].ffn.w_out.map_to::<f64>();
        let input =
            EditSolveInput { k1: d.k1.clone(), zprime1: d.zprime1.clone(), w0, lambda };
        let jit = jitter.unwrap_or_else(|| default_jitter(&input, &d.c0));
        let sol = solve_update(&input, &d.c0, jit)?;
        norms.push((d.position, sol.delta_w.frobenius_norm(), sol.residual));
        bundle.install(
            model,
            d.position,
            EditEntry { layer: d.layer, lambda, m: d.m, delta_w: sol.delta_w.map_to::<S>() },
        )?;
    }
    Ok((bundle, start.elapsed().as_secs_f64(), norms))
}

/// Full edit pipeline: deltas, statistics, solve, install. Returns the
/// bundle plus per-phase wall-clock.
pub fn run_edit_pipeline<S: Scalar>(
    model: &Model<S>,
    base_hash: [u8; 32],
    requests: &[TokenizedRequest],
    layer_choices: &BTreeMap<usize, usize>,
    covariance_contexts: &[(Vec<usize>, Vec<usize>)],
    cfg: &EditPipelineConfig,
) -> Result<(EditBundle<S>, EditTiming, Vec<PositionSolveData>)> {
    if requests.is_empty() {
        return Ok((EditBundle::new(base_hash), EditTiming::default(), Vec::new()));
    }
    let start = Instant::now();
    let (data, mut timing) =
        prepare_edit_data(model, requests, layer_choices, covariance_contexts, cfg)?;
    let (bundle, solve_s, _norms) = solve_bundle(model, base_hash, &data, cfg.lambda, cfg.jitter)?;
    timing.solve_seconds = solve_s;
    timing.total_seconds = start.elapsed().as_secs_f64();
    Ok((bundle, timing, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig, Precision};

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            d_ff: 10,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            activation: Activation::GatedSilu,
            precision: Precision::Fp64,
            seed: 2,
        };
        Model::new(cfg).unwrap()
    }

    #[test]
    fn single_key_covariance_is_rank_one() {
        let m = model();
        let contexts = vec![(vec![1, 4, 5], vec![1usize, 6])];
        let stats = collect_covariance(&m, &contexts, 0, 1).unwrap();
        assert_eq!(stats.sample_count, 1);
        assert!(stats.symmetry_defect() < 1e-12);
        let evs = symmetric_eigenvalues(&stats.c0, 64);
        let positive = evs.iter().filter(|&&e| e > 1e-12).count();
        assert_eq!(positive, 1, "single outer product has rank 1");
    }

    #[test]
    fn standard_basis_keys_give_diagonal_c0() {
        // Direct construction: C0 from keys e1, e2 is diag(1,1,0,...).
        let mut c0 = Matrix::<f64>::zeros(4, 4);
        let e1 = [1.0, 0.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0, 0.0];
        c0.acc_outer(&e1, &e1);
        c0.acc_outer(&e2, &e2);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j && i < 2 { 1.0 } else { 0.0 };
                assert_eq!(c0.get(i, j), expect);
            }
        }
    }

    #[test]
    fn covariance_is_psd_on_random_runs() {
        let m = model();
        let contexts: Vec<(Vec<usize>, Vec<usize>)> =
            (0..12).map(|i| (vec![1, 4 + (i % 4), 5], vec![1usize, 6 + (i % 3)])).collect();
        let stats = collect_covariance(&m, &contexts, 1, 1).unwrap();
        let evs = symmetric_eigenvalues(&stats.c0, 100);
        for e in evs {
            assert!(e >= -1e-9, "eigenvalue {e} below PSD tolerance");
        }
    }

    #[test]
    fn empty_requests_give_empty_bundle() {
        let m = model();
        let (bundle, timing, _) = run_edit_pipeline(
            &m,
            [0u8; 32],
            &[],
            &BTreeMap::new(),
            &[],
            &EditPipelineConfig::default(),
        )
        .unwrap();
        assert!(bundle.is_empty());
        assert_eq!(timing.total_seconds, 0.0);
    }

    #[test]
    fn minimal_pipeline_single_request() {
        let m = model();
        let requests = vec![TokenizedRequest {
            position: 1,
            history: vec![1, 4, 5],
            decoder: vec![1, 6],
            target: 9,
        }];
        let mut choices = BTreeMap::new();
        choices.insert(1usize, 1usize);
        let contexts: Vec<(Vec<usize>, Vec<usize>)> =
            (0..6).map(|i| (vec![1, 4 + (i % 4)], vec![1usize, 5 + (i % 4)])).collect();
        let cfg = EditPipelineConfig { lambda: 10.0, ..EditPipelineConfig::default() };
        let (bundle, timing, data) =
            run_edit_pipeline(&m, [1u8; 32], &requests, &choices, &contexts, &cfg).unwrap();
        assert_eq!(bundle.len(), 1);
        assert_eq!(data[0].m, 1, "K1 has one column");
        assert_eq!(timing.requests, 1);
        assert!(bundle.entry(1).unwrap().delta_w.is_finite());
    }
}
