//! Finite-difference oracles shared by unit and acceptance tests.
//!
//! These deliberately use only the forward pass, so they stay independent
//! of the backward implementation they check.

use crate::linalg::Matrix;
use crate::model::{next_token_loss, ForwardOpts, Model, OverrideSpec};
use crate::num::Scalar;

/// Loss via forward only (no caches reused across calls).
pub fn forward_loss<S: Scalar>(
    model: &Model<S>,
    history: &[usize],
    decoder: &[usize],
    targets: &[Option<usize>],
) -> f64 {
    let logits = model.forward_logits(history, decoder).expect("forward");
    next_token_loss(&logits, targets).expect("loss").0
}

/// Max relative error between analytic parameter gradients and central
/// finite differences, over every parameter. Only sensible for tiny fp64
/// models.
pub fn param_grad_max_rel_err(
    model: &Model<f64>,
    history: &[usize],
    decoder: &[usize],
    targets: &[Option<usize>],
    h: f64,
) -> f64 {
    let mut grads = model.params.zeros_like();
    model.loss_and_grad(history, decoder, targets, &mut grads).expect("backward");
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let n_tensors = grads.tensors().len();
    for ti in 0..n_tensors {
        let len = grads.tensors()[ti].2.len();
        for j in 0..len {
            let analytic = grads.tensors()[ti].2[j];
            {
                let mut t = probe.params.tensors_mut();
                t[ti].1[j] += h;
            }
            let up = forward_loss(&probe, history, decoder, targets);
            {
                let mut t = probe.params.tensors_mut();
                t[ti].1[j] -= 2.0 * h;
            }
            let down = forward_loss(&probe, history, decoder, targets);
            {
                let mut t = probe.params.tensors_mut();
                t[ti].1[j] += h;
            }
            let fd = (up - down) / (2.0 * h);
            // The 1e-3 floor keeps finite-difference roundoff (~1e-9
            // absolute here) from registering on near-zero gradients;
            // genuinely wrong gradients distort multiplicatively and are
            // caught regardless.
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Loss of the override forward at one site, as a pure function of the
/// replacement value (finite-difference target for value-shift gradients).
pub fn override_loss<S: Scalar>(
    model: &Model<S>,
    history: &[usize],
    decoder: &[usize],
    site: (usize, usize),
    value: &[S],
    target: usize,
) -> f64 {
    let logits = model
        .forward_with_value_override(history, decoder, site, value)
        .expect("override forward");
    let mut targets = vec![None; decoder.len()];
    targets[site.1] = Some(target);
    next_token_loss(&logits, &targets).expect("loss").0
}

/// Analytic gradient of the override loss w.r.t. the replacement value,
/// computed through the full backward path.
pub fn override_grad_full_path(
    model: &Model<f64>,
    history: &[usize],
    decoder: &[usize],
    site: (usize, usize),
    value: &[f64],
    target: usize,
) -> (f64, Vec<f64>) {
    let enc = model.encode(history).expect("encode");
    let opts = ForwardOpts {
        override_site: Some(OverrideSpec { layer: site.0, position: site.1, value }),
        ..ForwardOpts::none()
    };
    let dec = model.decode_full(&enc, decoder, &opts).expect("decode");
    let mut targets = vec![None; decoder.len()];
    targets[site.1] = Some(target);
    let (loss, dlogits) = next_token_loss(&dec.logits, &targets).expect("loss");
    let out = model.backward_from_dlogits(&enc, &dec, &dlogits, None);
    (loss, out.override_grad.expect("override grad"))
}

/// Central finite differences of the override loss w.r.t. the value.
pub fn override_grad_fd(
    model: &Model<f64>,
    history: &[usize],
    decoder: &[usize],
    site: (usize, usize),
    value: &[f64],
    target: usize,
    h: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; value.len()];
    let mut v = value.to_vec();
    for j in 0..v.len() {
        v[j] += h;
        let up = override_loss(model, history, decoder, site, &v, target);
        v[j] -= 2.0 * h;
        let down = override_loss(model, history, decoder, site, &v, target);
        v[j] += h;
        grad[j] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst relative error between two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Brute-force ranking of all length-m digit sequences by joint log-prob
/// under repeated single-step decoding (oracle for beam search).
pub fn enumerate_joint_logprobs<S: Scalar>(
    model: &Model<S>,
    history: &[usize],
    tokens_per_step: &[Vec<usize>],
    bos: usize,
) -> Vec<(Vec<usize>, f64)> {
    let mut completed: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for step_tokens in tokens_per_step {
        let mut next = Vec::new();
        for (prefix, score) in &completed {
            let mut dec = vec![bos];
            dec.extend_from_slice(prefix);
            let logits = model.forward_logits(history, &dec).expect("forward");
            let row = logits.row(logits.rows() - 1);
            let log_probs = crate::linalg::log_softmax_f64(row);
            for &t in step_tokens {
                let mut seq = prefix.clone();
                seq.push(t);
                next.push((seq, score + log_probs[t]));
            }
        }
        completed = next;
    }
    completed.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
    });
    completed
}

/// Numerical rank of a key matrix (rows = samples): count of singular
/// values above `tol_frac` of the largest.
pub fn numerical_rank(rows: &[Vec<f64>], tol_frac: f64) -> usize {
    // Square-root-free: eigenvalues of the Gram matrix K^T K via Jacobi.
    let n = rows.len();
    let d = rows[0].len();
    let mut gram = Matrix::<f64>::zeros(d, d);
    for r in rows {
        gram.acc_outer(r, r);
    }
    let evs = crate::editor::symmetric_eigenvalues(&gram, 200);
    let max = evs.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    let thresh = max * tol_frac * tol_frac;
    let _ = n;
    evs.iter().filter(|&&e| e > thresh).count()
}
