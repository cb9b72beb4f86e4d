//! Per-request value-shift optimization.
//!
//! Finds the minimal shift delta on the FFN output at the edit site that
//! makes the frozen model prefer the target digit. Plain gradient descent:
//! the step size is set once from the first gradient, the shift norm is
//! clamped to a multiple of the original value's norm, and the loop exits
//! early once the target probability clears the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::norm2;
use crate::model::{DeltaWorkspace, Model};
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DeltaOpts {
    pub max_steps: usize,
    /// Early exit once p(target) reaches this.
    pub target_prob: f64,
    /// ||delta|| <= clamp_factor * ||z||, projected after each step.
    pub clamp_factor: f64,
    /// Step size = lr_factor * ||z|| / ||grad_0||, fixed after step 0.
    pub lr_factor: f64,
}

impl Default for DeltaOpts {
    fn default() -> Self {
        DeltaOpts { max_steps: 25, target_prob: 0.99, clamp_factor: 4.0, lr_factor: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct DeltaResult<S> {
    pub delta: Vec<S>,
    /// Captured key at the site (column of K1).
    pub key: Vec<S>,
    /// Original FFN output z at the site.
    pub original_value: Vec<S>,
    pub initial_prob: f64,
    pub final_prob: f64,
    pub steps: usize,
}

/// Optimize one request's value shift against the frozen base model.
pub fn optimize_delta<S: Scalar>(
    model: &Model<S>,
    history_tokens: &[usize],
    decoder_tokens: &[usize],
    site_layer: usize,
    target_token: usize,
    opts: &DeltaOpts,
) -> Result<DeltaResult<S>> {
    let ws = DeltaWorkspace::new(model, history_tokens, decoder_tokens, site_layer, target_token)?;
    let d = model.cfg.d_model;
    let z_norm = norm2(ws.original_value());
    let mut delta = vec![S::zero(); d];

    let first = ws.step(model, &delta)?;
    if !first.loss.is_finite() {
        return Err(CoreError::numerical(format!(
            "non-finite edit loss at step 0 (target {target_token})"
        )));
    }
    let initial_prob = first.target_prob;
    if initial_prob >= opts.target_prob {
        return Ok(DeltaResult {
            delta,
            key: ws.key().to_vec(),
            original_value: ws.original_value().to_vec(),
            initial_prob,
            final_prob: initial_prob,
            steps: 0,
        });
    }
    let g0 = norm2(&first.grad);
    if g0 < 1e-12 {
        // Flat loss surface; nothing to optimize.
        return Ok(DeltaResult {
            delta,
            key: ws.key().to_vec(),
            original_value: ws.original_value().to_vec(),
            initial_prob,
            final_prob: initial_prob,
            steps: 0,
        });
    }
    let scale_ref = if z_norm > 0.0 { z_norm } else { 1.0 };
    let lr = opts.lr_factor * scale_ref / g0;
    let clamp = opts.clamp_factor * scale_ref;

    let mut grad = first.grad;
    let mut final_prob = initial_prob;
    let mut steps = 0;
    for _ in 0..opts.max_steps {
        steps += 1;
        for (dj, gj) in delta.iter_mut().zip(&grad) {
            *dj = *dj - S::cast(lr) * *gj;
        }
        let n = norm2(&delta);
        if n > clamp {
            let shrink = S::cast(clamp / n);
            for dj in delta.iter_mut() {
                *dj *= shrink;
            }
        }
        let step = ws.step(model, &delta)?;
        if !step.loss.is_finite() {
            return Err(CoreError::numerical(format!(
                "non-finite edit loss at step {steps} (target {target_token})"
            )));
        }
        final_prob = step.target_prob;
        if final_prob >= opts.target_prob {
            break;
        }
        grad = step.grad;
    }
    Ok(DeltaResult {
        delta,
        key: ws.key().to_vec(),
        original_value: ws.original_value().to_vec(),
        initial_prob,
        final_prob,
        steps,
    })
}


/// Object-wise variant for the position-wise ablation: one shift at the
/// site must raise every digit of the target bundle at once, so the loss
/// averages cross-entropy over all target positions and gradients flow
/// through the full backward path (the shifted value influences later
/// positions via attention).
pub fn optimize_delta_multi<S: Scalar>(
    model: &Model<S>,
    history_tokens: &[usize],
    decoder_tokens: &[usize],
    site: (usize, usize),
    targets: &[Option<usize>],
    opts: &DeltaOpts,
) -> Result<DeltaResult<S>> {
    use crate::model::{next_token_loss, ForwardOpts, OverrideSpec};

    let enc = model.encode(history_tokens)?;
    let capture_opts = ForwardOpts {
        capture_sites: &[site],
        ..ForwardOpts::none()
    };
    let base = model.decode_full(&enc, decoder_tokens, &capture_opts)?;
    let cap = base.captures.into_iter().next().ok_or_else(|| {
        CoreError::input(format!("site {site:?} out of range"))
    })?;
    let z = cap.value;
    let key = cap.key;
    let z_norm = norm2(&z);
    let d = model.cfg.d_model;
    let mut delta = vec![S::zero(); d];

    let eval = |delta: &[S]| -> Result<(f64, f64, Vec<S>)> {
        let value: Vec<S> = z.iter().zip(delta).map(|(&a, &b)| a + b).collect();
        let opts_fwd = ForwardOpts {
            override_site: Some(OverrideSpec { layer: site.0, position: site.1, value: &value }),
            ..ForwardOpts::none()
        };
        let dec = model.decode_full(&enc, decoder_tokens, &opts_fwd)?;
        let (loss, dlogits) = next_token_loss(&dec.logits, targets)?;
        // Mean probability across target positions, for the early exit.
        let mut prob = 0.0;
        let mut counted = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                prob += crate::model::row_probability(dec.logits.row(i), *t);
                counted += 1;
            }
        }
        let out = model.backward_from_dlogits(&enc, &dec, &dlogits, None);
        Ok((loss, prob / counted.max(1) as f64, out.override_grad.expect("override grad")))
    };

    let (loss0, prob0, grad0) = eval(&delta)?;
    if !loss0.is_finite() {
        return Err(CoreError::numerical("non-finite edit loss at step 0"));
    }
    if prob0 >= opts.target_prob {
        return Ok(DeltaResult {
            delta,
            key,
            original_value: z,
            initial_prob: prob0,
            final_prob: prob0,
            steps: 0,
        });
    }
    let g0 = norm2(&grad0);
    if g0 < 1e-12 {
        return Ok(DeltaResult {
            delta,
            key,
            original_value: z,
            initial_prob: prob0,
            final_prob: prob0,
            steps: 0,
        });
    }
    let scale_ref = if z_norm > 0.0 { z_norm } else { 1.0 };
    let lr = opts.lr_factor * scale_ref / g0;
    let clamp = opts.clamp_factor * scale_ref;
    let mut grad = grad0;
    let mut final_prob = prob0;
    let mut steps = 0;
    for _ in 0..opts.max_steps {
        steps += 1;
        for (dj, gj) in delta.iter_mut().zip(&grad) {
            *dj = *dj - S::cast(lr) * *gj;
        }
        let n = norm2(&delta);
        if n > clamp {
            let shrink = S::cast(clamp / n);
            for dj in delta.iter_mut() {
                *dj *= shrink;
            }
        }
        let (loss, prob, g) = eval(&delta)?;
        if !loss.is_finite() {
            return Err(CoreError::numerical(format!("non-finite edit loss at step {steps}")));
        }
        final_prob = prob;
        if final_prob >= opts.target_prob {
            break;
        }
        grad = g;
    }
    Ok(DeltaResult { delta, key, original_value: z, initial_prob: prob0, final_prob, steps })
}
