//! Manual reverse-mode pass mirroring `forward.rs`.
//!
//! Gradients accumulate into a `ModelParams` of identical shape. Passing
//! `None` for the gradient sink skips parameter accumulation and only
//! tracks activation gradients, which is all the value-shift optimizer
//! needs. Correctness is pinned by central-difference checks in the tests.

use crate::error::{CoreError, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::num::{silu, silu_grad, Scalar};

use super::forward::{AttnCache, DecodeResult, EncodeResult, FfnCache, NormCache};
use super::params::{Activation, AttnWeights, FfnWeights, ModelParams};
use super::Model;

/// Mean next-token cross-entropy over the positions with a target, plus
/// d(loss)/d(logits). Positions with `None` contribute nothing.
pub fn next_token_loss<S: Scalar>(
    logits: &Matrix<S>,
    targets: &[Option<usize>],
) -> Result<(f64, Matrix<S>)> {
    if targets.len() != logits.rows() {
        return Err(CoreError::input(format!(
            "targets length {} != decoder positions {}",
            targets.len(),
            logits.rows()
        )));
    }
    let counted = targets.iter().filter(|t| t.is_some()).count();
    if counted == 0 {
        return Err(CoreError::input("no positions carry a target"));
    }
    let inv = S::cast(1.0 / counted as f64);
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let Some(t) = target else { continue };
        if *t >= logits.cols() {
            return Err(CoreError::input(format!("target token {t} out of vocab range")));
        }
        let row = logits.row(i);
        let max = row.iter().fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = S::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let log_z = sum.ln() + max;
        loss += (log_z - row[*t]).as_f64();
        let drow = dlogits.row_mut(i);
        let inv_sum = S::one() / sum;
        for (j, d) in drow.iter_mut().enumerate() {
            *d = (row[j] - max).exp() * inv_sum * inv;
        }
        drow[*t] -= inv;
    }
    Ok((loss / counted as f64, dlogits))
}

/// Probability assigned to `target` at one logits row.
pub fn row_probability<S: Scalar>(row: &[S], target: usize) -> f64 {
    let ls = crate::linalg::log_softmax_f64(row);
    ls[target].exp()
}

pub(super) fn rmsnorm_backward<S: Scalar>(
    cache: &NormCache<S>,
    dy: &Matrix<S>,
    gain: &[S],
    mut dgain: Option<&mut [S]>,
) -> Matrix<S> {
    let d = gain.len();
    let d_inv = S::one() / S::cast(d as f64);
    let mut dx = Matrix::zeros(dy.rows(), d);
    for i in 0..dy.rows() {
        let x = cache.x.row(i);
        let dy_row = dy.row(i);
        let inv = cache.inv_rms[i];
        let mut s = S::zero();
        for j in 0..d {
            s += dy_row[j] * gain[j] * x[j];
        }
        let coef = inv * inv * inv * s * d_inv;
        let dx_row = dx.row_mut(i);
        for j in 0..d {
            dx_row[j] = dy_row[j] * gain[j] * inv - x[j] * coef;
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dy_row[j] * x[j] * inv;
            }
        }
    }
    dx
}

/// Returns (d_queries_src, d_keys_src).
#[allow(clippy::too_many_arguments)]
pub(super) fn attention_backward<S: Scalar>(
    w: &AttnWeights<S>,
    cache: &AttnCache<S>,
    queries_src: &Matrix<S>,
    keys_src: &Matrix<S>,
    dout: &Matrix<S>,
    n_heads: usize,
    causal: bool,
    mut grads: Option<&mut AttnWeights<S>>,
) -> (Matrix<S>, Matrix<S>) {
    let d = queries_src.cols();
    let dh = d / n_heads;
    let n_q = queries_src.rows();
    let n_k = keys_src.rows();
    let scale = S::cast(1.0 / (dh as f64).sqrt());

    let dcontext = dout.matmul_nn(&w.wo);
    if let Some(g) = grads.as_deref_mut() {
        dout.acc_matmul_tn(&cache.context, &mut g.wo);
    }

    let mut dq = Matrix::zeros(n_q, d);
    let mut dk = Matrix::zeros(n_k, d);
    let mut dv = Matrix::zeros(n_k, d);
    let mut dp = vec![S::zero(); n_k];
    for h in 0..n_heads {
        let c0 = h * dh;
        let c1 = c0 + dh;
        let probs = &cache.probs[h];
        for i in 0..n_q {
            let active = if causal { i + 1 } else { n_k };
            let dctx = &dcontext.row(i)[c0..c1];
            let p_row = probs.row(i);
            // dP and dV.
            for j in 0..active {
                dp[j] = dot(dctx, &cache.v.row(j)[c0..c1]);
                axpy(p_row[j], dctx, &mut dv.row_mut(j)[c0..c1]);
            }
            // Softmax backward.
            let mut s = S::zero();
            for j in 0..active {
                s += dp[j] * p_row[j];
            }
            // dQ, dK.
            let qi = &cache.q.row(i)[c0..c1];
            let dq_row = &mut dq.row_mut(i)[c0..c1];
            for j in 0..active {
                let ds = p_row[j] * (dp[j] - s) * scale;
                axpy(ds, &cache.k.row(j)[c0..c1], dq_row);
                axpy(ds, qi, &mut dk.row_mut(j)[c0..c1]);
            }
        }
    }
    let dq_src = dq.matmul_nn(&w.wq);
    let mut dk_src = dk.matmul_nn(&w.wk);
    dk_src.add_assign(&dv.matmul_nn(&w.wv));
    if let Some(g) = grads.as_deref_mut() {
        dq.acc_matmul_tn(queries_src, &mut g.wq);
        dk.acc_matmul_tn(keys_src, &mut g.wk);
        dv.acc_matmul_tn(keys_src, &mut g.wv);
    }
    (dq_src, dk_src)
}

/// Returns d_normed (gradient on the FFN input rows).
pub(super) fn ffn_backward<S: Scalar>(
    w: &FfnWeights<S>,
    activation: Activation,
    cache: &FfnCache<S>,
    normed: &Matrix<S>,
    dout: &Matrix<S>,
    mut grads: Option<&mut FfnWeights<S>>,
) -> Matrix<S> {
    let mut dkey = dout.matmul_nn(&w.w_out);
    if let Some(g) = grads.as_deref_mut() {
        dout.acc_matmul_tn(&cache.key, &mut g.w_out);
    }
    match activation {
        Activation::GatedSilu => {
            let gate_pre = cache.gate_pre.as_ref().expect("gated cache");
            let w_gate = w.w_gate.as_ref().expect("gated weights");
            let mut du = dkey.clone();
            let mut dg = dkey;
            for idx in 0..du.data().len() {
                let gp = gate_pre.data()[idx];
                let u = cache.u.data()[idx];
                let dk = du.data()[idx];
                du.data_mut()[idx] = dk * silu(gp);
                dg.data_mut()[idx] = dk * u * silu_grad(gp);
            }
            let mut dnormed = du.matmul_nn(&w.w_in);
            dnormed.add_assign(&dg.matmul_nn(w_gate));
            if let Some(g) = grads.as_deref_mut() {
                du.acc_matmul_tn(normed, &mut g.w_in);
                dg.acc_matmul_tn(normed, g.w_gate.as_mut().expect("gated grads"));
            }
            dnormed
        }
        Activation::Relu => {
            for (dk, &u) in dkey.data_mut().iter_mut().zip(cache.u.data()) {
                if u <= S::zero() {
                    *dk = S::zero();
                }
            }
            let dnormed = dkey.matmul_nn(&w.w_in);
            if let Some(g) = grads.as_deref_mut() {
                dkey.acc_matmul_tn(normed, &mut g.w_in);
            }
            dnormed
        }
    }
}

pub struct BackwardOutput<S> {
    /// Gradient on the override value, when the forward had an override.
    pub override_grad: Option<Vec<S>>,
}

impl<S: Scalar> Model<S> {
    /// Backpropagate `dlogits` through a cached forward. Parameter grads
    /// accumulate into `grads` when provided.
    pub fn backward_from_dlogits(
        &self,
        enc: &EncodeResult<S>,
        dec: &DecodeResult<S>,
        dlogits: &Matrix<S>,
        mut grads: Option<&mut ModelParams<S>>,
    ) -> BackwardOutput<S> {
        let p = &self.params;
        let n_heads = self.cfg.n_heads;
        let act = self.cfg.activation;
        let mut override_grad: Option<Vec<S>> = None;

        // Head.
        let dfinal = dlogits.matmul_nn(&p.lm_head);
        if let Some(g) = grads.as_deref_mut() {
            dlogits.acc_matmul_tn(&dec.final_states, &mut g.lm_head);
        }
        let mut dy = rmsnorm_backward(
            &dec.final_norm,
            &dfinal,
            &p.dec_final_norm,
            grads.as_deref_mut().map(|g| g.dec_final_norm.as_mut_slice()),
        );

        // Cross-attention gradients accumulate into the encoder output.
        let mut denc_out = Matrix::zeros(enc.output.rows(), enc.output.cols());

        for li in (0..p.dec_layers.len()).rev() {
            let layer = &p.dec_layers[li];
            let cache = &dec.layers[li];

            // FFN block: y = ffn_norm.x + ffn.out.
            let mut dffn_out = dy.clone();
            if let Some((ol, opos)) = dec.override_site {
                if ol == li {
                    override_grad = Some(dffn_out.row(opos).to_vec());
                    dffn_out.row_mut(opos).fill(S::zero());
                }
            }
            let dnormed = ffn_backward(
                &layer.ffn,
                act,
                &cache.ffn,
                &cache.ffn_norm.y,
                &dffn_out,
                grads.as_deref_mut().map(|g| &mut g.dec_layers[li].ffn),
            );
            let dmid2 = rmsnorm_backward(
                &cache.ffn_norm,
                &dnormed,
                &layer.ffn_norm,
                grads.as_deref_mut().map(|g| g.dec_layers[li].ffn_norm.as_mut_slice()),
            );
            dy.add_assign(&dmid2);

            // Cross-attention block: y_mid2 = cross_norm.x + cross_out.
            let (dq_src, dk_src) = attention_backward(
                &layer.cross_attn,
                &cache.cross_attn,
                &cache.cross_norm.y,
                &enc.output,
                &dy,
                n_heads,
                false,
                grads.as_deref_mut().map(|g| &mut g.dec_layers[li].cross_attn),
            );
            denc_out.add_assign(&dk_src);
            let dmid = rmsnorm_backward(
                &cache.cross_norm,
                &dq_src,
                &layer.cross_norm,
                grads.as_deref_mut().map(|g| g.dec_layers[li].cross_norm.as_mut_slice()),
            );
            dy.add_assign(&dmid);

            // Self-attention block: y_mid = self_norm.x + self_out.
            let (dq_src, dk_src) = attention_backward(
                &layer.self_attn,
                &cache.self_attn,
                &cache.self_norm.y,
                &cache.self_norm.y,
                &dy,
                n_heads,
                true,
                grads.as_deref_mut().map(|g| &mut g.dec_layers[li].self_attn),
            );
            let mut dnormed = dq_src;
            dnormed.add_assign(&dk_src);
            let dprev = rmsnorm_backward(
                &cache.self_norm,
                &dnormed,
                &layer.self_norm,
                grads.as_deref_mut().map(|g| g.dec_layers[li].self_norm.as_mut_slice()),
            );
            dy.add_assign(&dprev);
        }

        // Decoder embeddings.
        if let Some(g) = grads.as_deref_mut() {
            for (i, &t) in dec.tokens.iter().enumerate() {
                let row = dy.row(i);
                axpy(S::one(), row, g.tok_embed.row_mut(t));
                axpy(S::one(), row, g.dec_pos.row_mut(i));
            }
        }

        // Encoder final norm.
        let mut dx = rmsnorm_backward(
            &enc.final_norm,
            &denc_out,
            &p.enc_final_norm,
            grads.as_deref_mut().map(|g| g.enc_final_norm.as_mut_slice()),
        );

        for li in (0..p.enc_layers.len()).rev() {
            let layer = &p.enc_layers[li];
            let cache = &enc.layers[li];

            let dnormed = ffn_backward(
                &layer.ffn,
                act,
                &cache.ffn,
                &cache.ffn_norm.y,
                &dx,
                grads.as_deref_mut().map(|g| &mut g.enc_layers[li].ffn),
            );
            let dmid = rmsnorm_backward(
                &cache.ffn_norm,
                &dnormed,
                &layer.ffn_norm,
                grads.as_deref_mut().map(|g| g.enc_layers[li].ffn_norm.as_mut_slice()),
            );
            dx.add_assign(&dmid);

            let (dq_src, dk_src) = attention_backward(
                &layer.attn,
                &cache.attn,
                &cache.attn_norm.y,
                &cache.attn_norm.y,
                &dx,
                n_heads,
                false,
                grads.as_deref_mut().map(|g| &mut g.enc_layers[li].attn),
            );
            let mut dnormed = dq_src;
            dnormed.add_assign(&dk_src);
            let dprev = rmsnorm_backward(
                &cache.attn_norm,
                &dnormed,
                &layer.attn_norm,
                grads.as_deref_mut().map(|g| g.enc_layers[li].attn_norm.as_mut_slice()),
            );
            dx.add_assign(&dprev);
        }

        if let Some(g) = grads.as_deref_mut() {
            for (i, &t) in enc.tokens.iter().enumerate() {
                let row = dx.row(i);
                axpy(S::one(), row, g.tok_embed.row_mut(t));
                axpy(S::one(), row, g.enc_pos.row_mut(i));
            }
        }

        BackwardOutput { override_grad }
    }

    /// Convenience wrapper: forward + loss + full backward for one example.
    /// Returns the loss; gradients accumulate into `grads`.
    pub fn loss_and_grad(
        &self,
        history_tokens: &[usize],
        decoder_tokens: &[usize],
        targets: &[Option<usize>],
        grads: &mut ModelParams<S>,
    ) -> Result<f64> {
        let enc = self.encode(history_tokens)?;
        let dec = self.decode_full(&enc, decoder_tokens, &super::forward::ForwardOpts::none())?;
        let (loss, dlogits) = next_token_loss(&dec.logits, targets)?;
        self.backward_from_dlogits(&enc, &dec, &dlogits, Some(grads));
        Ok(loss)
    }
}
