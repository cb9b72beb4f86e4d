//! Incremental decoding and the last-position edit workspace.
//!
//! Beam search re-scores one appended token at a time, so recomputing the
//! whole prefix per step is wasted work; [`DecodeStream`] keeps per-layer
//! self-attention K/V rows and advances one position per call.
//!
//! [`DeltaWorkspace`] serves the value-shift optimizer: the edit site sits
//! at the *last* decoder position, so a shifted FFN output can only affect
//! that position's stream at layers above the site. One full forward caches
//! everything else; each optimizer step then recomputes a single token
//! column and backpropagates to the injected value alone.

use crate::error::{CoreError, Result};
use crate::linalg::{axpy, dot, log_softmax_f64, softmax_inplace, Matrix};
use crate::num::{silu, silu_grad, Scalar};

use super::forward::{DecodeResult, EncodeResult, RMS_EPS};
use super::params::{Activation, AttnWeights, FfnWeights};
use super::Model;

fn rmsnorm_vec<S: Scalar>(x: &[S], gain: &[S]) -> (Vec<S>, S) {
    let d = x.len();
    let ms = dot(x, x) / S::cast(d as f64);
    let inv = S::one() / (ms + S::cast(RMS_EPS)).sqrt();
    let y = x.iter().zip(gain).map(|(&xi, &gi)| gi * xi * inv).collect();
    (y, inv)
}

fn rmsnorm_vec_backward<S: Scalar>(x: &[S], inv: S, gain: &[S], dy: &[S]) -> Vec<S> {
    let d = x.len();
    let mut s = S::zero();
    for j in 0..d {
        s += dy[j] * gain[j] * x[j];
    }
    let coef = inv * inv * inv * s / S::cast(d as f64);
    (0..d).map(|j| dy[j] * gain[j] * inv - x[j] * coef).collect()
}

/// Attend a single query vector over keys/values given as row matrices
/// limited to `n_keys` rows. Returns (per-head probs, context).
fn attend_one<S: Scalar>(
    q: &[S],
    keys: &Matrix<S>,
    values: &Matrix<S>,
    n_keys: usize,
    n_heads: usize,
) -> (Vec<Vec<S>>, Vec<S>) {
    let d = q.len();
    let dh = d / n_heads;
    let scale = S::cast(1.0 / (dh as f64).sqrt());
    let mut probs = Vec::with_capacity(n_heads);
    let mut ctx = vec![S::zero(); d];
    for h in 0..n_heads {
        let c0 = h * dh;
        let c1 = c0 + dh;
        let qh = &q[c0..c1];
        let mut p: Vec<S> = (0..n_keys).map(|j| dot(qh, &keys.row(j)[c0..c1]) * scale).collect();
        softmax_inplace(&mut p, n_keys);
        let ctx_h = &mut ctx[c0..c1];
        for (j, &pj) in p.iter().enumerate() {
            axpy(pj, &values.row(j)[c0..c1], ctx_h);
        }
        probs.push(p);
    }
    (probs, ctx)
}

/// Variant for growing caches stored as `Vec<Vec<S>>` plus one fresh row.
fn attend_one_grown<S: Scalar>(
    q: &[S],
    cached_k: &[Vec<S>],
    cached_v: &[Vec<S>],
    own_k: &[S],
    own_v: &[S],
    n_heads: usize,
) -> (Vec<Vec<S>>, Vec<S>) {
    let d = q.len();
    let dh = d / n_heads;
    let scale = S::cast(1.0 / (dh as f64).sqrt());
    let n_keys = cached_k.len() + 1;
    let mut probs = Vec::with_capacity(n_heads);
    let mut ctx = vec![S::zero(); d];
    for h in 0..n_heads {
        let c0 = h * dh;
        let c1 = c0 + dh;
        let qh = &q[c0..c1];
        let mut p: Vec<S> = cached_k.iter().map(|k| dot(qh, &k[c0..c1]) * scale).collect();
        p.push(dot(qh, &own_k[c0..c1]) * scale);
        softmax_inplace(&mut p, n_keys);
        let ctx_h = &mut ctx[c0..c1];
        for (j, &pj) in p.iter().take(cached_k.len()).enumerate() {
            axpy(pj, &cached_v[j][c0..c1], ctx_h);
        }
        axpy(p[n_keys - 1], &own_v[c0..c1], ctx_h);
        probs.push(p);
    }
    (probs, ctx)
}

fn ffn_vec<S: Scalar>(
    w: &FfnWeights<S>,
    activation: Activation,
    normed: &[S],
    delta: Option<&Matrix<S>>,
) -> (Vec<S>, Option<Vec<S>>, Vec<S>, Vec<S>) {
    let u = w.w_in.matvec(normed);
    let (gate_pre, key) = match activation {
        Activation::GatedSilu => {
            let g = w.w_gate.as_ref().expect("gated weights").matvec(normed);
            let key: Vec<S> = u.iter().zip(&g).map(|(&ui, &gi)| ui * silu(gi)).collect();
            (Some(g), key)
        }
        Activation::Relu => {
            let key = u.iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect();
            (None, key)
        }
    };
    let mut out = w.w_out.matvec(&key);
    if let Some(dw) = delta {
        let extra = dw.matvec(&key);
        for (o, e) in out.iter_mut().zip(extra) {
            *o += e;
        }
    }
    (u, gate_pre, key, out)
}

/// Per-layer cross-attention keys/values, computed once per encoded history
/// and shared across beams.
pub struct CrossContext<S> {
    k: Vec<Matrix<S>>,
    v: Vec<Matrix<S>>,
    n_enc: usize,
}

/// Grow-by-one decoder state for a single hypothesis.
#[derive(Clone)]
pub struct DecodeStream<S> {
    self_k: Vec<Vec<Vec<S>>>,
    self_v: Vec<Vec<Vec<S>>>,
    len: usize,
}

impl<S: Scalar> DecodeStream<S> {
    pub fn new(n_dec_layers: usize) -> Self {
        DecodeStream {
            self_k: vec![Vec::new(); n_dec_layers],
            self_v: vec![Vec::new(); n_dec_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<S: Scalar> Model<S> {
    /// Precompute per-layer cross-attention K/V from encoder output.
    pub fn cross_context(&self, enc_output: &Matrix<S>) -> CrossContext<S> {
        let mut k = Vec::with_capacity(self.cfg.n_dec_layers);
        let mut v = Vec::with_capacity(self.cfg.n_dec_layers);
        for layer in &self.params.dec_layers {
            k.push(enc_output.matmul_nt(&layer.cross_attn.wk));
            v.push(enc_output.matmul_nt(&layer.cross_attn.wv));
        }
        CrossContext { k, v, n_enc: enc_output.rows() }
    }

    /// Feed one token through the decoder, returning the logits row for the
    /// new position. `deltas` are per-layer additive W_out updates (the
    /// gating hook); pass an all-`None` slice for base behavior.
    pub fn decode_step(
        &self,
        stream: &mut DecodeStream<S>,
        cross: &CrossContext<S>,
        token: usize,
        deltas: &[Option<&Matrix<S>>],
    ) -> Result<Vec<S>> {
        let cfg = &self.cfg;
        if token >= cfg.vocab_size {
            return Err(CoreError::input(format!("token {token} out of range")));
        }
        let pos = stream.len;
        if pos >= cfg.max_seq_len {
            return Err(CoreError::input("decode length exceeds max_seq_len"));
        }
        if deltas.len() != cfg.n_dec_layers {
            return Err(CoreError::input("deltas must cover every decoder layer"));
        }
        let p = &self.params;
        let mut x: Vec<S> = p.tok_embed.row(token).to_vec();
        for (xi, pi) in x.iter_mut().zip(p.dec_pos.row(pos)) {
            *xi += *pi;
        }
        for (li, layer) in p.dec_layers.iter().enumerate() {
            // Self-attention.
            let (a, _) = rmsnorm_vec(&x, &layer.self_norm);
            let q = layer.self_attn.wq.matvec(&a);
            let k = layer.self_attn.wk.matvec(&a);
            let v = layer.self_attn.wv.matvec(&a);
            let (_, ctx) = attend_one_grown(
                &q,
                &stream.self_k[li],
                &stream.self_v[li],
                &k,
                &v,
                cfg.n_heads,
            );
            stream.self_k[li].push(k);
            stream.self_v[li].push(v);
            let attn_out = layer.self_attn.wo.matvec(&ctx);
            for (xi, oi) in x.iter_mut().zip(&attn_out) {
                *xi += *oi;
            }
            // Cross-attention.
            let (b, _) = rmsnorm_vec(&x, &layer.cross_norm);
            let q2 = layer.cross_attn.wq.matvec(&b);
            let (_, ctx2) = attend_one(&q2, &cross.k[li], &cross.v[li], cross.n_enc, cfg.n_heads);
            let cross_out = layer.cross_attn.wo.matvec(&ctx2);
            for (xi, oi) in x.iter_mut().zip(&cross_out) {
                *xi += *oi;
            }
            // FFN.
            let (c, _) = rmsnorm_vec(&x, &layer.ffn_norm);
            let (_, _, _, f) = ffn_vec(&layer.ffn, cfg.activation, &c, deltas[li]);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += *fi;
            }
        }
        stream.len += 1;
        let (final_x, _) = rmsnorm_vec(&x, &p.dec_final_norm);
        Ok(p.lm_head.matvec(&final_x))
    }
}

struct WsLayerCache<S> {
    x_in: Vec<S>,
    a_inv: S,
    q: Vec<S>,
    own_k: Vec<S>,
    own_v: Vec<S>,
    self_probs: Vec<Vec<S>>,
    x_mid: Vec<S>,
    b_inv: S,
    cross_probs: Vec<Vec<S>>,
    x_mid2: Vec<S>,
    c_inv: S,
    u: Vec<S>,
    gate_pre: Option<Vec<S>>,
}

/// One optimizer step's returns.
pub struct DeltaStep<S> {
    pub loss: f64,
    pub target_prob: f64,
    pub grad: Vec<S>,
}

/// Frozen forward context for optimizing a value shift at the last decoder
/// position of one edit request.
pub struct DeltaWorkspace<S> {
    enc: EncodeResult<S>,
    dec: DecodeResult<S>,
    site_layer: usize,
    position: usize,
    target: usize,
    /// FFN input-residual row at the site (stream before adding FFN out).
    x_mid2_site: Vec<S>,
    original_value: Vec<S>,
    key: Vec<S>,
    hidden: Vec<S>,
}

impl<S: Scalar> DeltaWorkspace<S> {
    /// Runs the base forward once and freezes every δ-independent quantity.
    pub fn new(
        model: &Model<S>,
        history_tokens: &[usize],
        decoder_tokens: &[usize],
        site_layer: usize,
        target: usize,
    ) -> Result<Self> {
        if target >= model.cfg.vocab_size {
            return Err(CoreError::input(format!("target token {target} out of range")));
        }
        let position = decoder_tokens.len() - 1;
        let enc = model.encode(history_tokens)?;
        let opts = super::forward::ForwardOpts {
            capture_sites: &[(site_layer, position)],
            ..super::forward::ForwardOpts::none()
        };
        let dec = model.decode_full(&enc, decoder_tokens, &opts)?;
        let cap = dec.captures.first().ok_or_else(|| {
            CoreError::input(format!("site layer {site_layer} out of range"))
        })?;
        let x_mid2_site = dec.layers[site_layer].ffn_norm.x.row(position).to_vec();
        let original_value = cap.value.clone();
        let key = cap.key.clone();
        let hidden = cap.hidden.clone();
        Ok(DeltaWorkspace {
            enc,
            dec,
            site_layer,
            position,
            target,
            x_mid2_site,
            original_value,
            key,
            hidden,
        })
    }

    pub fn original_value(&self) -> &[S] {
        &self.original_value
    }

    pub fn key(&self) -> &[S] {
        &self.key
    }

    pub fn hidden(&self) -> &[S] {
        &self.hidden
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Loss, target probability and d(loss)/d(delta) at the injected site.
    pub fn step(&self, model: &Model<S>, delta: &[S]) -> Result<DeltaStep<S>> {
        let cfg = &model.cfg;
        let p = &model.params;
        let pos = self.position;
        let n_heads = cfg.n_heads;
        if delta.len() != cfg.d_model {
            return Err(CoreError::input("delta has wrong dimension"));
        }

        // ---- forward over layers above the site, position `pos` only ----
        let mut x: Vec<S> = self
            .x_mid2_site
            .iter()
            .zip(self.original_value.iter().zip(delta))
            .map(|(&xm, (&z, &d))| xm + z + d)
            .collect();
        let mut caches: Vec<WsLayerCache<S>> = Vec::with_capacity(cfg.n_dec_layers);
        for li in self.site_layer + 1..cfg.n_dec_layers {
            let layer = &p.dec_layers[li];
            let cache = &self.dec.layers[li];
            let x_in = x.clone();
            let (a, a_inv) = rmsnorm_vec(&x, &layer.self_norm);
            let q = layer.self_attn.wq.matvec(&a);
            let own_k = layer.self_attn.wk.matvec(&a);
            let own_v = layer.self_attn.wv.matvec(&a);
            // Earlier positions are δ-independent; reuse the frozen K/V rows.
            let (self_probs, self_ctx) = attend_frozen_plus_own(
                &q,
                &cache.self_attn.k,
                &cache.self_attn.v,
                pos,
                &own_k,
                &own_v,
                n_heads,
            );
            let attn_out = layer.self_attn.wo.matvec(&self_ctx);
            for (xi, oi) in x.iter_mut().zip(&attn_out) {
                *xi += *oi;
            }
            let x_mid = x.clone();
            let (b, b_inv) = rmsnorm_vec(&x, &layer.cross_norm);
            let q2 = layer.cross_attn.wq.matvec(&b);
            let (cross_probs, cross_ctx) = attend_one(
                &q2,
                &cache.cross_attn.k,
                &cache.cross_attn.v,
                self.enc.output.rows(),
                n_heads,
            );
            let cross_out = layer.cross_attn.wo.matvec(&cross_ctx);
            for (xi, oi) in x.iter_mut().zip(&cross_out) {
                *xi += *oi;
            }
            let x_mid2 = x.clone();
            let (c, c_inv) = rmsnorm_vec(&x, &layer.ffn_norm);
            let (u, gate_pre, _key, f) = ffn_vec(&layer.ffn, cfg.activation, &c, None);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += *fi;
            }
            caches.push(WsLayerCache {
                x_in,
                a_inv,
                q,
                own_k,
                own_v,
                self_probs,
                x_mid,
                b_inv,
                cross_probs,
                x_mid2,
                c_inv,
                u,
                gate_pre,
            })
        }
        let (final_x, final_inv) = rmsnorm_vec(&x, &p.dec_final_norm);
        let logits = p.lm_head.matvec(&final_x);

        let log_probs = log_softmax_f64(&logits);
        let loss = -log_probs[self.target];
        let target_prob = log_probs[self.target].exp();

        // ---- backward to the injected value ----
        let mut dlogits: Vec<S> =
            log_probs.iter().map(|&lp| S::cast(lp.exp())).collect();
        dlogits[self.target] -= S::one();
        let dfinal = p.lm_head.matvec_t(&dlogits);
        let mut dx = rmsnorm_vec_backward(&x, final_inv, &p.dec_final_norm, &dfinal);

        for (ci, li) in (self.site_layer + 1..cfg.n_dec_layers).enumerate().rev() {
            let layer = &p.dec_layers[li];
            let cache = &caches[ci];
            let frozen = &self.dec.layers[li];
            // FFN block.
            let dc = ffn_vec_backward(&layer.ffn, cfg.activation, cache, &dx);
            let dmid2 = rmsnorm_vec_backward(&cache.x_mid2, cache.c_inv, &layer.ffn_norm, &dc);
            for (a, b) in dx.iter_mut().zip(&dmid2) {
                *a += *b;
            }
            // Cross-attention block (keys/values frozen).
            let db = cross_attn_vec_backward(
                &layer.cross_attn,
                &cache.cross_probs,
                &frozen.cross_attn.k,
                &frozen.cross_attn.v,
                self.enc.output.rows(),
                &dx,
                n_heads,
            );
            let dmid = rmsnorm_vec_backward(&cache.x_mid, cache.b_inv, &layer.cross_norm, &db);
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += *b;
            }
            // Self-attention block (frozen rows 0..pos, own k/v at pos).
            let da = self_attn_vec_backward(
                &layer.self_attn,
                cache,
                &frozen.self_attn.k,
                &frozen.self_attn.v,
                pos,
                &dx,
                n_heads,
            );
            let dprev = rmsnorm_vec_backward(&cache.x_in, cache.a_inv, &layer.self_norm, &da);
            for (a, b) in dx.iter_mut().zip(&dprev) {
                *a += *b;
            }
        }
        // x at the site was x_mid2 + z + delta: dx IS d(delta).
        Ok(DeltaStep { loss, target_prob, grad: dx })
    }
}

/// Attention over frozen K/V rows `0..pos` plus a δ-dependent own row.
fn attend_frozen_plus_own<S: Scalar>(
    q: &[S],
    frozen_k: &Matrix<S>,
    frozen_v: &Matrix<S>,
    pos: usize,
    own_k: &[S],
    own_v: &[S],
    n_heads: usize,
) -> (Vec<Vec<S>>, Vec<S>) {
    let d = q.len();
    let dh = d / n_heads;
    let scale = S::cast(1.0 / (dh as f64).sqrt());
    let mut probs = Vec::with_capacity(n_heads);
    let mut ctx = vec![S::zero(); d];
    for h in 0..n_heads {
        let c0 = h * dh;
        let c1 = c0 + dh;
        let qh = &q[c0..c1];
        let mut p: Vec<S> =
            (0..pos).map(|j| dot(qh, &frozen_k.row(j)[c0..c1]) * scale).collect();
        p.push(dot(qh, &own_k[c0..c1]) * scale);
        softmax_inplace(&mut p, pos + 1);
        let ctx_h = &mut ctx[c0..c1];
        for (j, &pj) in p.iter().take(pos).enumerate() {
            axpy(pj, &frozen_v.row(j)[c0..c1], ctx_h);
        }
        axpy(p[pos], &own_v[c0..c1], ctx_h);
        probs.push(p);
    }
    (probs, ctx)
}

fn ffn_vec_backward<S: Scalar>(
    w: &FfnWeights<S>,
    activation: Activation,
    cache: &WsLayerCache<S>,
    dout: &[S],
) -> Vec<S> {
    let dkey = w.w_out.matvec_t(dout);
    match activation {
        Activation::GatedSilu => {
            let g = cache.gate_pre.as_ref().expect("gated cache");
            let w_gate = w.w_gate.as_ref().expect("gated weights");
            let du: Vec<S> = dkey.iter().zip(g).map(|(&dk, &gi)| dk * silu(gi)).collect();
            let dg: Vec<S> = dkey
                .iter()
                .zip(g.iter().zip(&cache.u))
                .map(|(&dk, (&gi, &ui))| dk * ui * silu_grad(gi))
                .collect();
            let mut dc = w.w_in.matvec_t(&du);
            let dc2 = w_gate.matvec_t(&dg);
            for (a, b) in dc.iter_mut().zip(dc2) {
                *a += b;
            }
            dc
        }
        Activation::Relu => {
            let du: Vec<S> = dkey
                .iter()
                .zip(&cache.u)
                .map(|(&dk, &ui)| if ui > S::zero() { dk } else { S::zero() })
                .collect();
            w.w_in.matvec_t(&du)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cross_attn_vec_backward<S: Scalar>(
    w: &AttnWeights<S>,
    probs: &[Vec<S>],
    keys: &Matrix<S>,
    values: &Matrix<S>,
    n_keys: usize,
    dout: &[S],
    n_heads: usize,
) -> Vec<S> {
    let d = dout.len();
    let dh = d / n_heads;
    let scale = S::cast(1.0 / (dh as f64).sqrt());
    let dctx = w.wo.matvec_t(dout);
    let mut dq = vec![S::zero(); d];
    for h in 0..n_heads {
        let c0 = h * dh;
        let c1 = c0 + dh;
        let dctx_h = &dctx[c0..c1];
        let p = &probs[h];
        let mut dp = vec![S::zero(); n_keys];
        let mut s = S::zero();
        for j in 0..n_keys {
            dp[j] = dot(dctx_h, &values.row(j)[c0..c1]);
            s += dp[j] * p[j];
        }
        let dq_h = &mut dq[c0..c1];
        for j in 0..n_keys {
            let ds = p[j] * (dp[j] - s) * scale;
            axpy(ds, &keys.row(j)[c0..c1], dq_h);
        }
    }
    w.wq.matvec_t(&dq)
}

/// Self-attention backward where only the own (last) K/V row is live.
fn self_attn_vec_backward<S: Scalar>(
    w: &AttnWeights<S>,
    cache: &WsLayerCache<S>,
    frozen_k: &Matrix<S>,
    frozen_v: &Matrix<S>,
    pos: usize,
    dout: &[S],
    n_heads: usize,
) -> Vec<S> {
    let d = cache.q.len();
    let dh = d / n_heads;
    let scale = S::cast(1.0 / (dh as f64).sqrt());
    let dctx = w.wo.matvec_t(dout);
    let mut dq = vec![S::zero(); d];
    let mut dk_own = vec![S::zero(); d];
    let mut dv_own = vec![S::zero(); d];
    for h in 0..n_heads {
        let c0 = h * dh;
        let c1 = c0 + dh;
        let dctx_h = &dctx[c0..c1];
        let p = &cache.self_probs[h];
        let n_keys = pos + 1;
        let mut dp = vec![S::zero(); n_keys];
        for (j, dpj) in dp.iter_mut().enumerate().take(pos) {
            *dpj = dot(dctx_h, &frozen_v.row(j)[c0..c1]);
        }
        dp[pos] = dot(dctx_h, &cache.own_v[c0..c1]);
        axpy(p[pos], dctx_h, &mut dv_own[c0..c1]);
        let mut s = S::zero();
        for j in 0..n_keys {
            s += dp[j] * p[j];
        }
        let qh = &cache.q[c0..c1];
        let dq_h = &mut dq[c0..c1];
        for j in 0..n_keys {
            let ds = p[j] * (dp[j] - s) * scale;
            if j < pos {
                axpy(ds, &frozen_k.row(j)[c0..c1], dq_h);
            } else {
                axpy(ds, &cache.own_k[c0..c1], dq_h);
                axpy(ds, qh, &mut dk_own[c0..c1]);
            }
        }
    }
    let mut da = w.wq.matvec_t(&dq);
    let dk_in = w.wk.matvec_t(&dk_own);
    let dv_in = w.wv.matvec_t(&dv_own);
    for i in 0..da.len() {
        da[i] += dk_in[i] + dv_in[i];
    }
    da
}

