//! Full-sequence forward pass with caches for backprop, plus activation
//! capture and FFN-output override hooks.
//!
//! Architecture: pre-norm encoder-decoder. Encoder blocks are
//! self-attention + key/value FFN; decoder blocks add cross-attention over
//! the encoder output. Norms are RMS with learned gains, positions are
//! learned absolute embeddings, and the head is an untied linear projection.

use crate::error::{CoreError, Result};
use crate::linalg::{axpy, dot, softmax_inplace, Matrix};
use crate::num::{silu, Scalar};

use super::params::{Activation, AttnWeights, FfnWeights, ModelConfig, ModelParams};
use super::Model;

pub const RMS_EPS: f64 = 1e-6;

/// FFN key/value snapshot at one (decoder layer, token position) site.
#[derive(Clone, Debug)]
pub struct ActivationCapture<S> {
    pub layer: usize,
    pub token_position: usize,
    /// Normed FFN input h at the site (d_model).
    pub hidden: Vec<S>,
    /// Post-activation key sigma(W_in h) (d_ff).
    pub key: Vec<S>,
    /// FFN output value z = W_out k before the residual add (d_model).
    pub value: Vec<S>,
}

/// Replace the FFN output at one decoder site before the residual add.
#[derive(Clone, Copy, Debug)]
pub struct OverrideSpec<'a, S> {
    pub layer: usize,
    pub position: usize,
    pub value: &'a [S],
}

/// Optional hooks threaded through a decoder forward.
#[derive(Clone, Copy, Default)]
pub struct ForwardOpts<'a, S> {
    /// Per-decoder-layer additive updates to W_out (gating applies these).
    pub ffn_deltas: Option<&'a [Option<&'a Matrix<S>>]>,
    pub override_site: Option<OverrideSpec<'a, S>>,
    pub capture_sites: &'a [(usize, usize)],
}

impl<'a, S> ForwardOpts<'a, S> {
    pub fn none() -> Self {
        ForwardOpts { ffn_deltas: None, override_site: None, capture_sites: &[] }
    }
}

#[derive(Clone, Debug)]
pub struct NormCache<S> {
    /// Input rows to the norm (the residual stream).
    pub x: Matrix<S>,
    /// 1 / rms per row.
    pub inv_rms: Vec<S>,
    /// Normed output rows.
    pub y: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct AttnCache<S> {
    pub q: Matrix<S>,
    pub k: Matrix<S>,
    pub v: Matrix<S>,
    /// Attention probabilities per head, each n_q x n_k.
    pub probs: Vec<Matrix<S>>,
    /// Concatenated head outputs before W_o.
    pub context: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct FfnCache<S> {
    /// Pre-activation W_in b.
    pub u: Matrix<S>,
    /// Gate pre-activation W_gate b (gated activation only).
    pub gate_pre: Option<Matrix<S>>,
    /// Post-activation keys.
    pub key: Matrix<S>,
    /// FFN output rows actually added to the stream (post override/delta).
    pub out: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct EncLayerCache<S> {
    pub attn_norm: NormCache<S>,
    pub attn: AttnCache<S>,
    pub ffn_norm: NormCache<S>,
    pub ffn: FfnCache<S>,
}

#[derive(Clone, Debug)]
pub struct DecLayerCache<S> {
    pub self_norm: NormCache<S>,
    pub self_attn: AttnCache<S>,
    pub cross_norm: NormCache<S>,
    pub cross_attn: AttnCache<S>,
    pub ffn_norm: NormCache<S>,
    pub ffn: FfnCache<S>,
}

/// Encoder states plus everything needed to backprop through them.
pub struct EncodeResult<S> {
    pub tokens: Vec<usize>,
    pub layers: Vec<EncLayerCache<S>>,
    pub final_norm: NormCache<S>,
    /// Final normed encoder output, n_enc x d_model.
    pub output: Matrix<S>,
}

/// Decoder states for one forward, including logits.
pub struct DecodeResult<S> {
    pub tokens: Vec<usize>,
    pub layers: Vec<DecLayerCache<S>>,
    pub final_norm: NormCache<S>,
    pub final_states: Matrix<S>,
    pub logits: Matrix<S>,
    pub captures: Vec<ActivationCapture<S>>,
    pub override_site: Option<(usize, usize)>,
}

pub fn rmsnorm_forward<S: Scalar>(x: Matrix<S>, gain: &[S]) -> NormCache<S> {
    let d = gain.len();
    debug_assert_eq!(x.cols(), d);
    let eps = S::cast(RMS_EPS);
    let n_inv = S::one() / S::cast(d as f64);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv_rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = dot(row, row) * n_inv;
        let inv = S::one() / (ms + eps).sqrt();
        inv_rms.push(inv);
        for (j, out) in y.row_mut(i).iter_mut().enumerate() {
            *out = gain[j] * row[j] * inv;
        }
    }
    NormCache { x, inv_rms, y }
}

/// Multi-head attention. `causal` masks position i to keys 0..=i (requires
/// square score matrices, i.e. self-attention).
pub fn attention_forward<S: Scalar>(
    w: &AttnWeights<S>,
    queries_from: &Matrix<S>,
    keys_from: &Matrix<S>,
    n_heads: usize,
    causal: bool,
) -> (AttnCache<S>, Matrix<S>) {
    let d = queries_from.cols();
    let dh = d / n_heads;
    let n_q = queries_from.rows();
    let n_k = keys_from.rows();
    debug_assert!(!causal || n_q == n_k);
    let q = queries_from.matmul_nt(&w.wq);
    let k = keys_from.matmul_nt(&w.wk);
    let v = keys_from.matmul_nt(&w.wv);
    let scale = S::cast(1.0 / (dh as f64).sqrt());
    let mut probs = Vec::with_capacity(n_heads);
    let mut context = Matrix::zeros(n_q, d);
    for h in 0..n_heads {
        let c0 = h * dh;
        let c1 = c0 + dh;
        let mut p = Matrix::zeros(n_q, n_k);
        for i in 0..n_q {
            let qi = &q.row(i)[c0..c1];
            let active = if causal { i + 1 } else { n_k };
            let row = p.row_mut(i);
            for (j, r) in row.iter_mut().enumerate().take(active) {
                *r = dot(qi, &k.row(j)[c0..c1]) * scale;
            }
            softmax_inplace(row, active);
        }
        for i in 0..n_q {
            let active = if causal { i + 1 } else { n_k };
            let p_row = p.row(i);
            let ctx_row = &mut context.row_mut(i)[c0..c1];
            for j in 0..active {
                axpy(p_row[j], &v.row(j)[c0..c1], ctx_row);
            }
        }
        probs.push(p);
    }
    let out = context.matmul_nt(&w.wo);
    (AttnCache { q, k, v, probs, context }, out)
}

/// Key/value FFN on already-normed rows. `delta` is an optional additive
/// update to W_out.
pub fn ffn_forward<S: Scalar>(
    w: &FfnWeights<S>,
    activation: Activation,
    normed: &Matrix<S>,
    delta: Option<&Matrix<S>>,
) -> FfnCache<S> {
    let u = normed.matmul_nt(&w.w_in);
    let (gate_pre, key) = match activation {
        Activation::GatedSilu => {
            let gate = w.w_gate.as_ref().expect("gated activation requires w_gate");
            let g = normed.matmul_nt(gate);
            let mut key = u.clone();
            for (kx, gx) in key.data_mut().iter_mut().zip(g.data()) {
                *kx *= silu(*gx);
            }
            (Some(g), key)
        }
        Activation::Relu => {
            let mut key = u.clone();
            for kx in key.data_mut().iter_mut() {
                if *kx < S::zero() {
                    *kx = S::zero();
                }
            }
            (None, key)
        }
    };
    let mut out = key.matmul_nt(&w.w_out);
    if let Some(dw) = delta {
        out.add_assign(&key.matmul_nt(dw));
    }
    FfnCache { u, gate_pre, key, out }
}

/// Apply one key/value FFN to a single hidden vector. Returns (key, value).
pub fn ffn_apply<S: Scalar>(
    w: &FfnWeights<S>,
    h: &[S],
    activation: Activation,
) -> Result<(Vec<S>, Vec<S>)> {
    if w.w_in.cols() != h.len() || w.w_out.cols() != w.w_in.rows() {
        return Err(CoreError::config(format!(
            "ffn shape mismatch: w_in {}x{}, w_out {}x{}, h {}",
            w.w_in.rows(),
            w.w_in.cols(),
            w.w_out.rows(),
            w.w_out.cols(),
            h.len()
        )));
    }
    if matches!(activation, Activation::GatedSilu) && w.w_gate.is_none() {
        return Err(CoreError::config("gated activation requires a gate matrix"));
    }
    let m = Matrix::from_vec(1, h.len(), h.to_vec());
    let cache = ffn_forward(w, activation, &m, None);
    Ok((cache.key.row(0).to_vec(), cache.out.row(0).to_vec()))
}

fn embed_tokens<S: Scalar>(
    tokens: &[usize],
    tok_embed: &Matrix<S>,
    pos_embed: &Matrix<S>,
) -> Matrix<S> {
    let d = tok_embed.cols();
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        row.copy_from_slice(tok_embed.row(t));
        for (a, b) in row.iter_mut().zip(pos_embed.row(i)) {
            *a += *b;
        }
    }
    x
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize], what: &str) -> Result<()> {
    if tokens.is_empty() {
        return Err(CoreError::input(format!("{what} token sequence is empty")));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(CoreError::input(format!(
            "{what} length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(CoreError::input(format!(
            "{what} token id {bad} out of range (vocab_size {})",
            cfg.vocab_size
        )));
    }
    Ok(())
}

impl<S: Scalar> Model<S> {
    /// Run the encoder over history tokens.
    pub fn encode(&self, history_tokens: &[usize]) -> Result<EncodeResult<S>> {
        check_tokens(&self.cfg, history_tokens, "history")?;
        let p = &self.params;
        let mut x = embed_tokens(history_tokens, &p.tok_embed, &p.enc_pos);
        let mut layers = Vec::with_capacity(p.enc_layers.len());
        for layer in &p.enc_layers {
            let attn_norm = rmsnorm_forward(x, &layer.attn_norm);
            let (attn, attn_out) =
                attention_forward(&layer.attn, &attn_norm.y, &attn_norm.y, self.cfg.n_heads, false);
            let mut x_mid = attn_norm.x.clone();
            x_mid.add_assign(&attn_out);
            let ffn_norm = rmsnorm_forward(x_mid, &layer.ffn_norm);
            let ffn = ffn_forward(&layer.ffn, self.cfg.activation, &ffn_norm.y, None);
            let mut x_next = ffn_norm.x.clone();
            x_next.add_assign(&ffn.out);
            layers.push(EncLayerCache { attn_norm, attn, ffn_norm, ffn });
            x = x_next;
        }
        let final_norm = rmsnorm_forward(x, &p.enc_final_norm);
        let output = final_norm.y.clone();
        Ok(EncodeResult { tokens: history_tokens.to_vec(), layers, final_norm, output })
    }

    /// Run the decoder over `decoder_tokens` given encoder output.
    pub fn decode_full(
        &self,
        enc: &EncodeResult<S>,
        decoder_tokens: &[usize],
        opts: &ForwardOpts<'_, S>,
    ) -> Result<DecodeResult<S>> {
        check_tokens(&self.cfg, decoder_tokens, "decoder")?;
        let n = decoder_tokens.len();
        let n_layers = self.cfg.n_dec_layers;
        if let Some(site) = &opts.override_site {
            if site.layer >= n_layers || site.position >= n {
                return Err(CoreError::input(format!(
                    "override site (layer {}, position {}) out of range",
                    site.layer, site.position
                )));
            }
            if site.value.len() != self.cfg.d_model {
                return Err(CoreError::input("override value has wrong dimension"));
            }
            if site.value.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::input("override value is not finite"));
            }
        }
        for &(l, pos) in opts.capture_sites {
            if l >= n_layers || pos >= n {
                return Err(CoreError::input(format!(
                    "capture site (layer {l}, position {pos}) out of range"
                )));
            }
        }
        if let Some(deltas) = opts.ffn_deltas {
            if deltas.len() != n_layers {
                return Err(CoreError::input("ffn_deltas must cover every decoder layer"));
            }
        }

        let p = &self.params;
        let mut y = embed_tokens(decoder_tokens, &p.tok_embed, &p.dec_pos);
        let mut layers = Vec::with_capacity(n_layers);
        let mut captures = Vec::new();
        for (li, layer) in p.dec_layers.iter().enumerate() {
            let self_norm = rmsnorm_forward(y, &layer.self_norm);
            let (self_attn, self_out) =
                attention_forward(&layer.self_attn, &self_norm.y, &self_norm.y, self.cfg.n_heads, true);
            let mut y_mid = self_norm.x.clone();
            y_mid.add_assign(&self_out);

            let cross_norm = rmsnorm_forward(y_mid, &layer.cross_norm);
            let (cross_attn, cross_out) = attention_forward(
                &layer.cross_attn,
                &cross_norm.y,
                &enc.output,
                self.cfg.n_heads,
                false,
            );
            let mut y_mid2 = cross_norm.x.clone();
            y_mid2.add_assign(&cross_out);

            let ffn_norm = rmsnorm_forward(y_mid2, &layer.ffn_norm);
            let delta = opts.ffn_deltas.and_then(|ds| ds[li]);
            let mut ffn = ffn_forward(&layer.ffn, self.cfg.activation, &ffn_norm.y, delta);

            // Captures snapshot the FFN as computed, before any override.
            for &(cl, cpos) in opts.capture_sites {
                if cl == li {
                    captures.push(ActivationCapture {
                        layer: cl,
                        token_position: cpos,
                        hidden: ffn_norm.y.row(cpos).to_vec(),
                        key: ffn.key.row(cpos).to_vec(),
                        value: ffn.out.row(cpos).to_vec(),
                    });
                }
            }
            if let Some(site) = &opts.override_site {
                if site.layer == li {
                    ffn.out.row_mut(site.position).copy_from_slice(site.value);
                }
            }
            let mut y_next = ffn_norm.x.clone();
            y_next.add_assign(&ffn.out);
            layers.push(DecLayerCache { self_norm, self_attn, cross_norm, cross_attn, ffn_norm, ffn });
            y = y_next;
        }
        let final_norm = rmsnorm_forward(y, &p.dec_final_norm);
        let final_states = final_norm.y.clone();
        let logits = final_states.matmul_nt(&p.lm_head);
        // Capture order follows the requested sites, not layer order.
        captures.sort_by_key(|c| {
            opts.capture_sites
                .iter()
                .position(|&(l, pos)| l == c.layer && pos == c.token_position)
                .unwrap_or(usize::MAX)
        });
        Ok(DecodeResult {
            tokens: decoder_tokens.to_vec(),
            layers,
            final_norm,
            final_states,
            logits,
            captures,
            override_site: opts.override_site.map(|s| (s.layer, s.position)),
        })
    }

    /// Logits for every decoder position: pure function of (params, inputs).
    pub fn forward_logits(
        &self,
        history_tokens: &[usize],
        decoder_tokens: &[usize],
    ) -> Result<Matrix<S>> {
        let enc = self.encode(history_tokens)?;
        let dec = self.decode_full(&enc, decoder_tokens, &ForwardOpts::none())?;
        Ok(dec.logits)
    }

    /// Snapshot FFN keys/values at the given decoder sites; the forward pass
    /// is identical to [`forward_logits`].
    pub fn capture_activations(
        &self,
        history_tokens: &[usize],
        decoder_tokens: &[usize],
        sites: &[(usize, usize)],
    ) -> Result<Vec<ActivationCapture<S>>> {
        let enc = self.encode(history_tokens)?;
        let opts = ForwardOpts { capture_sites: sites, ..ForwardOpts::none() };
        let dec = self.decode_full(&enc, decoder_tokens, &opts)?;
        Ok(dec.captures)
    }

    /// Forward pass with the FFN output at `site` replaced by `value`.
    pub fn forward_with_value_override(
        &self,
        history_tokens: &[usize],
        decoder_tokens: &[usize],
        site: (usize, usize),
        value: &[S],
    ) -> Result<Matrix<S>> {
        let enc = self.encode(history_tokens)?;
        let opts = ForwardOpts {
            override_site: Some(OverrideSpec { layer: site.0, position: site.1, value }),
            ..ForwardOpts::none()
        };
        let dec = self.decode_full(&enc, decoder_tokens, &opts)?;
        Ok(dec.logits)
    }
}

/// Duplicate capture sites yield duplicate snapshots by construction; keep
/// the helper here so callers don't re-derive per-request site lists.
pub fn sites_for_all_layers(n_layers: usize, position: usize) -> Vec<(usize, usize)> {
    (0..n_layers).map(|l| (l, position)).collect()
}

impl<S: Scalar> ModelParams<S> {
    /// Frozen reference to one decoder FFN, used by edit installation.
    pub fn decoder_ffn(&self, layer: usize) -> &FfnWeights<S> {
        &self.dec_layers[layer].ffn
    }
}
