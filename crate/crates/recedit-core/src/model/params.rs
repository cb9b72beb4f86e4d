//! Model configuration, parameter containers, and tensor enumeration.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    GatedSilu,
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::GatedSilu => "gated-silu",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "gated-silu" => Ok(Activation::GatedSilu),
            "relu" => Ok(Activation::Relu),
            other => Err(CoreError::config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "fp64" => Ok(Precision::Fp64),
            other => Err(CoreError::config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// FFN inner width; the key vector lives here.
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 260,
            d_model: 64,
            d_ff: 256,
            n_enc_layers: 2,
            n_dec_layers: 6,
            n_heads: 4,
            max_seq_len: 128,
            activation: Activation::GatedSilu,
            precision: Precision::Fp32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(CoreError::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(CoreError::config(format!(
                "d_ff {} must be >= d_model {}",
                self.d_ff, self.d_model
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(CoreError::config("vocab_size and max_seq_len must be positive"));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(CoreError::config("need at least one encoder and one decoder layer"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Flat `key=value` block stored in checkpoint headers.
    pub fn to_kv_text(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nd_ff={}\nn_enc_layers={}\nn_dec_layers={}\nn_heads={}\nmax_seq_len={}\nactivation={}\nprecision={}\nseed={}\n",
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.n_enc_layers,
            self.n_dec_layers,
            self.n_heads,
            self.max_seq_len,
            self.activation.name(),
            self.precision.name(),
            self.seed
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CoreError::config(format!("bad config line {line:?}")))?;
            let parse_usize = |v: &str| {
                v.parse::<usize>().map_err(|e| CoreError::config(format!("{key}: {e}")))
            };
            match key {
                "vocab_size" => cfg.vocab_size = parse_usize(value)?,
                "d_model" => cfg.d_model = parse_usize(value)?,
                "d_ff" => cfg.d_ff = parse_usize(value)?,
                "n_enc_layers" => cfg.n_enc_layers = parse_usize(value)?,
                "n_dec_layers" => cfg.n_dec_layers = parse_usize(value)?,
                "n_heads" => cfg.n_heads = parse_usize(value)?,
                "max_seq_len" => cfg.max_seq_len = parse_usize(value)?,
                "activation" => cfg.activation = Activation::from_name(value)?,
                "precision" => cfg.precision = Precision::from_name(value)?,
                "seed" => {
                    cfg.seed =
                        value.parse().map_err(|e| CoreError::config(format!("seed: {e}")))?
                }
                other => return Err(CoreError::config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights<S> {
    /// d_ff x d_model
    pub w_in: Matrix<S>,
    /// Present only for the gated activation; same shape as `w_in`.
    pub w_gate: Option<Matrix<S>>,
    /// d_model x d_ff
    pub w_out: Matrix<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<S> {
    pub attn_norm: Vec<S>,
    pub attn: AttnWeights<S>,
    pub ffn_norm: Vec<S>,
    pub ffn: FfnWeights<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<S> {
    pub self_norm: Vec<S>,
    pub self_attn: AttnWeights<S>,
    pub cross_norm: Vec<S>,
    pub cross_attn: AttnWeights<S>,
    pub ffn_norm: Vec<S>,
    pub ffn: FfnWeights<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub tok_embed: Matrix<S>,
    pub enc_pos: Matrix<S>,
    pub dec_pos: Matrix<S>,
    pub enc_layers: Vec<EncoderLayer<S>>,
    pub dec_layers: Vec<DecoderLayer<S>>,
    pub enc_final_norm: Vec<S>,
    pub dec_final_norm: Vec<S>,
    pub lm_head: Matrix<S>,
}

fn push_mat<'a, S>(out: &mut Vec<(String, Vec<usize>, &'a [S])>, name: String, m: &'a Matrix<S>) {
    out.push((name, vec![m.rows(), m.cols()], m.data()));
}

fn push_vec<'a, S>(out: &mut Vec<(String, Vec<usize>, &'a [S])>, name: String, v: &'a [S]) {
    out.push((name, vec![v.len()], v));
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_matrix<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<S> {
    Matrix::from_fn(rows, cols, |_, _| S::cast(gauss(rng, std)))
}

impl<S: Scalar> ModelParams<S> {
    /// Scaled-Gaussian init: embeddings at std 0.02, layer weights at
    /// 0.02 / sqrt(total layers), norm gains at one.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let emb_std = 0.02;
        let layer_std = 0.02 / ((cfg.n_enc_layers + cfg.n_dec_layers) as f64).sqrt();
        let attn = |rng: &mut ChaCha8Rng| AttnWeights {
            wq: gaussian_matrix(rng, d, d, layer_std),
            wk: gaussian_matrix(rng, d, d, layer_std),
            wv: gaussian_matrix(rng, d, d, layer_std),
            wo: gaussian_matrix(rng, d, d, layer_std),
        };
        let ffn = |rng: &mut ChaCha8Rng| FfnWeights {
            w_in: gaussian_matrix(rng, cfg.d_ff, d, layer_std),
            w_gate: match cfg.activation {
                Activation::GatedSilu => Some(gaussian_matrix(rng, cfg.d_ff, d, layer_std)),
                Activation::Relu => None,
            },
            w_out: gaussian_matrix(rng, d, cfg.d_ff, layer_std),
        };
        let ones = vec![S::one(); d];
        let tok_embed = gaussian_matrix(&mut rng, cfg.vocab_size, d, emb_std);
        let enc_pos = gaussian_matrix(&mut rng, cfg.max_seq_len, d, emb_std);
        let dec_pos = gaussian_matrix(&mut rng, cfg.max_seq_len, d, emb_std);
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|_| EncoderLayer {
                attn_norm: ones.clone(),
                attn: attn(&mut rng),
                ffn_norm: ones.clone(),
                ffn: ffn(&mut rng),
            })
            .collect();
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|_| DecoderLayer {
                self_norm: ones.clone(),
                self_attn: attn(&mut rng),
                cross_norm: ones.clone(),
                cross_attn: attn(&mut rng),
                ffn_norm: ones.clone(),
                ffn: ffn(&mut rng),
            })
            .collect();
        let lm_head = gaussian_matrix(&mut rng, cfg.vocab_size, d, emb_std);
        ModelParams {
            tok_embed,
            enc_pos,
            dec_pos,
            enc_layers,
            dec_layers,
            enc_final_norm: ones.clone(),
            dec_final_norm: ones,
            lm_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let zero_attn = |a: &AttnWeights<S>| AttnWeights {
            wq: Matrix::zeros(a.wq.rows(), a.wq.cols()),
            wk: Matrix::zeros(a.wk.rows(), a.wk.cols()),
            wv: Matrix::zeros(a.wv.rows(), a.wv.cols()),
            wo: Matrix::zeros(a.wo.rows(), a.wo.cols()),
        };
        let zero_ffn = |f: &FfnWeights<S>| FfnWeights {
            w_in: Matrix::zeros(f.w_in.rows(), f.w_in.cols()),
            w_gate: f.w_gate.as_ref().map(|g| Matrix::zeros(g.rows(), g.cols())),
            w_out: Matrix::zeros(f.w_out.rows(), f.w_out.cols()),
        };
        ModelParams {
            tok_embed: Matrix::zeros(self.tok_embed.rows(), self.tok_embed.cols()),
            enc_pos: Matrix::zeros(self.enc_pos.rows(), self.enc_pos.cols()),
            dec_pos: Matrix::zeros(self.dec_pos.rows(), self.dec_pos.cols()),
            enc_layers: self
                .enc_layers
                .iter()
                .map(|l| EncoderLayer {
                    attn_norm: vec![S::zero(); l.attn_norm.len()],
                    attn: zero_attn(&l.attn),
                    ffn_norm: vec![S::zero(); l.ffn_norm.len()],
                    ffn: zero_ffn(&l.ffn),
                })
                .collect(),
            dec_layers: self
                .dec_layers
                .iter()
                .map(|l| DecoderLayer {
                    self_norm: vec![S::zero(); l.self_norm.len()],
                    self_attn: zero_attn(&l.self_attn),
                    cross_norm: vec![S::zero(); l.cross_norm.len()],
                    cross_attn: zero_attn(&l.cross_attn),
                    ffn_norm: vec![S::zero(); l.ffn_norm.len()],
                    ffn: zero_ffn(&l.ffn),
                })
                .collect(),
            enc_final_norm: vec![S::zero(); self.enc_final_norm.len()],
            dec_final_norm: vec![S::zero(); self.dec_final_norm.len()],
            lm_head: Matrix::zeros(self.lm_head.rows(), self.lm_head.cols()),
        }
    }

    /// Named tensors in a fixed canonical order: (name, shape, data).
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out: Vec<(String, Vec<usize>, &[S])> = Vec::new();
        push_mat(&mut out, "tok_embed".into(), &self.tok_embed);
        push_mat(&mut out, "enc_pos".into(), &self.enc_pos);
        push_mat(&mut out, "dec_pos".into(), &self.dec_pos);
        for (i, l) in self.enc_layers.iter().enumerate() {
            push_vec(&mut out, format!("enc.{i}.attn_norm"), &l.attn_norm);
            push_mat(&mut out, format!("enc.{i}.attn.wq"), &l.attn.wq);
            push_mat(&mut out, format!("enc.{i}.attn.wk"), &l.attn.wk);
            push_mat(&mut out, format!("enc.{i}.attn.wv"), &l.attn.wv);
            push_mat(&mut out, format!("enc.{i}.attn.wo"), &l.attn.wo);
            push_vec(&mut out, format!("enc.{i}.ffn_norm"), &l.ffn_norm);
            push_mat(&mut out, format!("enc.{i}.ffn.w_in"), &l.ffn.w_in);
            if let Some(g) = &l.ffn.w_gate {
                push_mat(&mut out, format!("enc.{i}.ffn.w_gate"), g);
            }
            push_mat(&mut out, format!("enc.{i}.ffn.w_out"), &l.ffn.w_out);
        }
        for (i, l) in self.dec_layers.iter().enumerate() {
            push_vec(&mut out, format!("dec.{i}.self_norm"), &l.self_norm);
            push_mat(&mut out, format!("dec.{i}.self_attn.wq"), &l.self_attn.wq);
            push_mat(&mut out, format!("dec.{i}.self_attn.wk"), &l.self_attn.wk);
            push_mat(&mut out, format!("dec.{i}.self_attn.wv"), &l.self_attn.wv);
            push_mat(&mut out, format!("dec.{i}.self_attn.wo"), &l.self_attn.wo);
            push_vec(&mut out, format!("dec.{i}.cross_norm"), &l.cross_norm);
            push_mat(&mut out, format!("dec.{i}.cross_attn.wq"), &l.cross_attn.wq);
            push_mat(&mut out, format!("dec.{i}.cross_attn.wk"), &l.cross_attn.wk);
            push_mat(&mut out, format!("dec.{i}.cross_attn.wv"), &l.cross_attn.wv);
            push_mat(&mut out, format!("dec.{i}.cross_attn.wo"), &l.cross_attn.wo);
            push_vec(&mut out, format!("dec.{i}.ffn_norm"), &l.ffn_norm);
            push_mat(&mut out, format!("dec.{i}.ffn.w_in"), &l.ffn.w_in);
            if let Some(g) = &l.ffn.w_gate {
                push_mat(&mut out, format!("dec.{i}.ffn.w_gate"), g);
            }
            push_mat(&mut out, format!("dec.{i}.ffn.w_out"), &l.ffn.w_out);
        }
        push_vec(&mut out, "enc_final_norm".into(), &self.enc_final_norm);
        push_vec(&mut out, "dec_final_norm".into(), &self.dec_final_norm);
        push_mat(&mut out, "lm_head".into(), &self.lm_head);
        out
    }

    /// Mutable counterpart of [`tensors`], same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut out: Vec<(String, &mut [S])> = Vec::new();
        out.push(("tok_embed".into(), self.tok_embed.data_mut()));
        out.push(("enc_pos".into(), self.enc_pos.data_mut()));
        out.push(("dec_pos".into(), self.dec_pos.data_mut()));
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            out.push((format!("enc.{i}.attn_norm"), l.attn_norm.as_mut_slice()));
            out.push((format!("enc.{i}.attn.wq"), l.attn.wq.data_mut()));
            out.push((format!("enc.{i}.attn.wk"), l.attn.wk.data_mut()));
            out.push((format!("enc.{i}.attn.wv"), l.attn.wv.data_mut()));
            out.push((format!("enc.{i}.attn.wo"), l.attn.wo.data_mut()));
            out.push((format!("enc.{i}.ffn_norm"), l.ffn_norm.as_mut_slice()));
            out.push((format!("enc.{i}.ffn.w_in"), l.ffn.w_in.data_mut()));
            if let Some(g) = &mut l.ffn.w_gate {
                out.push((format!("enc.{i}.ffn.w_gate"), g.data_mut()));
            }
            out.push((format!("enc.{i}.ffn.w_out"), l.ffn.w_out.data_mut()));
        }
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            out.push((format!("dec.{i}.self_norm"), l.self_norm.as_mut_slice()));
            out.push((format!("dec.{i}.self_attn.wq"), l.self_attn.wq.data_mut()));
            out.push((format!("dec.{i}.self_attn.wk"), l.self_attn.wk.data_mut()));
            out.push((format!("dec.{i}.self_attn.wv"), l.self_attn.wv.data_mut()));
            out.push((format!("dec.{i}.self_attn.wo"), l.self_attn.wo.data_mut()));
            out.push((format!("dec.{i}.cross_norm"), l.cross_norm.as_mut_slice()));
            out.push((format!("dec.{i}.cross_attn.wq"), l.cross_attn.wq.data_mut()));
            out.push((format!("dec.{i}.cross_attn.wk"), l.cross_attn.wk.data_mut()));
            out.push((format!("dec.{i}.cross_attn.wv"), l.cross_attn.wv.data_mut()));
            out.push((format!("dec.{i}.cross_attn.wo"), l.cross_attn.wo.data_mut()));
            out.push((format!("dec.{i}.ffn_norm"), l.ffn_norm.as_mut_slice()));
            out.push((format!("dec.{i}.ffn.w_in"), l.ffn.w_in.data_mut()));
            if let Some(g) = &mut l.ffn.w_gate {
                out.push((format!("dec.{i}.ffn.w_gate"), g.data_mut()));
            }
            out.push((format!("dec.{i}.ffn.w_out"), l.ffn.w_out.data_mut()));
        }
        out.push(("enc_final_norm".into(), self.enc_final_norm.as_mut_slice()));
        out.push(("dec_final_norm".into(), self.dec_final_norm.as_mut_slice()));
        out.push(("lm_head".into(), self.lm_head.data_mut()));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn map_to<T: Scalar>(&self) -> ModelParams<T> {
        let map_attn = |a: &AttnWeights<S>| AttnWeights {
            wq: a.wq.map_to(),
            wk: a.wk.map_to(),
            wv: a.wv.map_to(),
            wo: a.wo.map_to(),
        };
        let map_ffn = |f: &FfnWeights<S>| FfnWeights {
            w_in: f.w_in.map_to(),
            w_gate: f.w_gate.as_ref().map(|g| g.map_to()),
            w_out: f.w_out.map_to(),
        };
        let map_vec = |v: &[S]| v.iter().map(|x| T::cast(x.as_f64())).collect::<Vec<T>>();
        ModelParams {
            tok_embed: self.tok_embed.map_to(),
            enc_pos: self.enc_pos.map_to(),
            dec_pos: self.dec_pos.map_to(),
            enc_layers: self
                .enc_layers
                .iter()
                .map(|l| EncoderLayer {
                    attn_norm: map_vec(&l.attn_norm),
                    attn: map_attn(&l.attn),
                    ffn_norm: map_vec(&l.ffn_norm),
                    ffn: map_ffn(&l.ffn),
                })
                .collect(),
            dec_layers: self
                .dec_layers
                .iter()
                .map(|l| DecoderLayer {
                    self_norm: map_vec(&l.self_norm),
                    self_attn: map_attn(&l.self_attn),
                    cross_norm: map_vec(&l.cross_norm),
                    cross_attn: map_attn(&l.cross_attn),
                    ffn_norm: map_vec(&l.ffn_norm),
                    ffn: map_ffn(&l.ffn),
                })
                .collect(),
            enc_final_norm: map_vec(&self.enc_final_norm),
            dec_final_norm: map_vec(&self.dec_final_norm),
            lm_head: self.lm_head.map_to(),
        }
    }
}
