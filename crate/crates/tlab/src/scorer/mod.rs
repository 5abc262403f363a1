//! Reference transduction model: encoder stack, label decoder, joint network,
//! and the auxiliary heads (CTC, LM, per-layer auxiliary joints).
//!
//! Everything is plain `f64` with hand-written forward and backward passes;
//! parameter initialization is deterministic for a fixed seed. Shape
//! mismatches on the public entry points are reported as contract errors,
//! internal ones panic.

mod backward;
mod forward;
mod io;

pub use backward::{backward, model_loss};
pub use forward::{
    batch_decode_step, compute_lattice, decode_step, encode, joint, start_state, Forward,
    UtteranceScorer,
};
pub use io::{load_parameters, save_parameters};

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::{Error, Result};

/// One encoder layer: a plain affine map or a unidirectional tanh RNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { out_dim: usize },
    TanhRnn { hidden_dim: usize },
}

impl LayerSpec {
    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Linear { out_dim } => out_dim,
            LayerSpec::TanhRnn { hidden_dim } => hidden_dim,
        }
    }
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            LayerSpec::Linear { out_dim } => write!(f, "linear({out_dim})"),
            LayerSpec::TanhRnn { hidden_dim } => write!(f, "tanh_rnn({hidden_dim})"),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_dim = |inner: &str| -> Result<usize> {
            inner.parse::<usize>().map_err(|_| {
                Error::Config(format!("bad layer dimension in {s:?}"))
            })
        };
        if let Some(inner) = s.strip_prefix("linear(").and_then(|r| r.strip_suffix(')')) {
            return Ok(LayerSpec::Linear { out_dim: parse_dim(inner)? });
        }
        if let Some(inner) = s.strip_prefix("tanh_rnn(").and_then(|r| r.strip_suffix(')')) {
            return Ok(LayerSpec::TanhRnn { hidden_dim: parse_dim(inner)? });
        }
        Err(Error::Config(format!(
            "unknown layer spec {s:?}; expected linear(n) or tanh_rnn(n)"
        )))
    }
}

/// Model architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub enc_layers: Vec<LayerSpec>,
    pub dec_embed_dim: usize,
    pub dec_hidden_dim: usize,
    pub joint_dim: usize,
    /// Label vocabulary size (blank excluded); joint outputs are `vocab + 1` wide.
    pub vocab: u32,
    /// 1-based encoder layer indices carrying an auxiliary joint tap.
    pub aux_layers: Vec<usize>,
}

impl ModelConfig {
    /// Default small model: one 16-unit tanh RNN encoder layer, 8-dim label
    /// embedding, 16-dim decoder and joint.
    pub fn small(input_dim: usize, vocab: u32) -> Self {
        Self {
            input_dim,
            enc_layers: vec![LayerSpec::TanhRnn { hidden_dim: 16 }],
            dec_embed_dim: 8,
            dec_hidden_dim: 16,
            joint_dim: 16,
            vocab,
            aux_layers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.dec_embed_dim == 0
            || self.dec_hidden_dim == 0
            || self.joint_dim == 0
        {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocabulary must contain at least one label".into()));
        }
        if self.enc_layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.enc_layers.iter().any(|l| l.out_dim() == 0) {
            return Err(Error::Config("encoder layer dimensions must be at least 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.aux_layers {
            if l == 0 || l > self.enc_layers.len() {
                return Err(Error::Config(format!(
                    "auxiliary tap {l} outside encoder depth 1..={}",
                    self.enc_layers.len()
                )));
            }
            if !seen.insert(l) {
                return Err(Error::Config(format!("auxiliary tap {l} listed twice")));
            }
        }
        if self.aux_layers.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("auxiliary taps must be listed in ascending order".into()));
        }
        Ok(())
    }

    /// Output width of every encoder layer, in order.
    pub fn enc_dims(&self) -> Vec<usize> {
        self.enc_layers.iter().map(|l| l.out_dim()).collect()
    }

    /// Width of the final encoder layer.
    pub fn enc_out_dim(&self) -> usize {
        self.enc_layers.last().expect("validated non-empty").out_dim()
    }

    fn symbols(&self) -> usize {
        self.vocab as usize + 1
    }

    /// Serializes to the `key = value` lines used by the parameter container
    /// and the `[model]` config section.
    pub fn to_kv_lines(&self) -> String {
        let layers: Vec<String> = self.enc_layers.iter().map(|l| l.to_string()).collect();
        let taps: Vec<String> = self.aux_layers.iter().map(|l| l.to_string()).collect();
        format!(
            "input_dim = {}\nenc_layers = {}\ndec_embed_dim = {}\ndec_hidden_dim = {}\njoint_dim = {}\nvocab = {}\naux_layers = {}\n",
            self.input_dim,
            layers.join(","),
            self.dec_embed_dim,
            self.dec_hidden_dim,
            self.joint_dim,
            self.vocab,
            taps.join(",")
        )
    }

    /// Parses the output of [`ModelConfig::to_kv_lines`]. Unknown keys are
    /// rejected; every field must be present.
    pub fn from_kv_lines(text: &str) -> Result<Self> {
        let mut fields: std::collections::BTreeMap<&str, &str> = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key = value, got {line:?}")))?;
            fields.insert(key.trim(), value.trim());
        }
        let mut take = |key: &str| -> Result<&str> {
            fields
                .remove(key)
                .ok_or_else(|| Error::Format(format!("model config is missing {key:?}")))
        };
        let parse_usize = |key: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Format(format!("bad value for {key}: {v:?}")))
        };
        let input_dim = parse_usize("input_dim", take("input_dim")?)?;
        let enc_layers = take("enc_layers")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<LayerSpec>>>()?;
        let dec_embed_dim = parse_usize("dec_embed_dim", take("dec_embed_dim")?)?;
        let dec_hidden_dim = parse_usize("dec_hidden_dim", take("dec_hidden_dim")?)?;
        let joint_dim = parse_usize("joint_dim", take("joint_dim")?)?;
        let vocab = take("vocab")?
            .parse::<u32>()
            .map_err(|_| Error::Format("bad value for vocab".into()))?;
        let aux_layers = take("aux_layers")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_usize("aux_layers", s.trim()))
            .collect::<Result<Vec<usize>>>()?;
        if let Some((key, _)) = fields.into_iter().next() {
            return Err(Error::Format(format!("unknown model config key {key:?}")));
        }
        let cfg = Self {
            input_dim,
            enc_layers,
            dec_embed_dim,
            dec_hidden_dim,
            joint_dim,
            vocab,
            aux_layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub enum EncLayerParams {
    Linear {
        w: Array2<f64>, // (in, out)
        b: Array1<f64>,
    },
    TanhRnn {
        w_x: Array2<f64>, // (in, hidden)
        w_h: Array2<f64>, // (hidden, hidden)
        b: Array1<f64>,
    },
}

/// Two-layer perceptron projecting an encoder tap into the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>, // (tap_dim, joint_dim)
    pub b1: Array1<f64>,
    pub w2: Array2<f64>, // (joint_dim, joint_dim)
    pub b2: Array1<f64>,
}

/// Full parameter set. Doubles as the gradient container: gradients have
/// exactly the same shapes, so optimizer math runs over matched tensor pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub enc: Vec<EncLayerParams>,
    /// `(vocab + 1, embed_dim)`; row 0 is the start-of-sequence embedding
    /// (blank is never fed to the decoder, so index 0 is free for it).
    pub embed: Array2<f64>,
    pub dec_wx: Array2<f64>, // (embed_dim, dec_hidden)
    pub dec_wh: Array2<f64>, // (dec_hidden, dec_hidden)
    pub dec_b: Array1<f64>,
    pub joint_wenc: Array2<f64>, // (enc_out, joint_dim)
    pub joint_wdec: Array2<f64>, // (dec_hidden, joint_dim)
    pub joint_b: Array1<f64>,
    pub joint_wout: Array2<f64>, // (joint_dim, vocab + 1)
    pub joint_bout: Array1<f64>,
    pub ctc_w: Array2<f64>, // (enc_out, vocab + 1)
    pub ctc_b: Array1<f64>,
    pub lm_w: Array2<f64>, // (dec_hidden, vocab + 1)
    pub lm_b: Array1<f64>,
    /// One perceptron per configured tap, in tap order.
    pub aux_mlps: Vec<MlpParams>,
    /// Output projection of the auxiliary joints, shared across taps.
    pub aux_wout: Array2<f64>, // (joint_dim, vocab + 1)
    pub aux_bout: Array1<f64>,
}

/// Draws parameters uniformly from `[-s, s]` with `s = 1 / sqrt(fan_in)`,
/// biases zero. The draw order is the tensor order of
/// [`ModelParameters::tensors`], row-major within each tensor, so a given
/// `(config, seed)` pair always produces bit-identical parameters.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut params = zeros_for(config);
    let mut rng = StdRng::seed_from_u64(seed);
    for (_, mut tensor) in params.tensors_mut() {
        let fan_in = match tensor.ndim() {
            1 => continue, // biases stay zero
            2 => tensor.shape()[0],
            d => unreachable!("rank-{d} parameter tensor"),
        };
        let s = 1.0 / (fan_in as f64).sqrt();
        for x in tensor.iter_mut() {
            *x = s * (2.0 * rng.gen::<f64>() - 1.0);
        }
    }
    Ok(params)
}

fn zeros_for(config: &ModelConfig) -> ModelParameters {
    let symbols = config.symbols();
    let mut in_dim = config.input_dim;
    let mut enc = Vec::with_capacity(config.enc_layers.len());
    for layer in &config.enc_layers {
        match *layer {
            LayerSpec::Linear { out_dim } => {
                enc.push(EncLayerParams::Linear {
                    w: Array2::zeros((in_dim, out_dim)),
                    b: Array1::zeros(out_dim),
                });
                in_dim = out_dim;
            }
            LayerSpec::TanhRnn { hidden_dim } => {
                enc.push(EncLayerParams::TanhRnn {
                    w_x: Array2::zeros((in_dim, hidden_dim)),
                    w_h: Array2::zeros((hidden_dim, hidden_dim)),
                    b: Array1::zeros(hidden_dim),
                });
                in_dim = hidden_dim;
            }
        }
    }
    let enc_out = config.enc_out_dim();
    let dims = config.enc_dims();
    ModelParameters {
        enc,
        embed: Array2::zeros((symbols, config.dec_embed_dim)),
        dec_wx: Array2::zeros((config.dec_embed_dim, config.dec_hidden_dim)),
        dec_wh: Array2::zeros((config.dec_hidden_dim, config.dec_hidden_dim)),
        dec_b: Array1::zeros(config.dec_hidden_dim),
        joint_wenc: Array2::zeros((enc_out, config.joint_dim)),
        joint_wdec: Array2::zeros((config.dec_hidden_dim, config.joint_dim)),
        joint_b: Array1::zeros(config.joint_dim),
        joint_wout: Array2::zeros((config.joint_dim, symbols)),
        joint_bout: Array1::zeros(symbols),
        ctc_w: Array2::zeros((enc_out, symbols)),
        ctc_b: Array1::zeros(symbols),
        lm_w: Array2::zeros((config.dec_hidden_dim, symbols)),
        lm_b: Array1::zeros(symbols),
        aux_mlps: config
            .aux_layers
            .iter()
            .map(|&l| MlpParams {
                w1: Array2::zeros((dims[l - 1], config.joint_dim)),
                b1: Array1::zeros(config.joint_dim),
                w2: Array2::zeros((config.joint_dim, config.joint_dim)),
                b2: Array1::zeros(config.joint_dim),
            })
            .collect(),
        aux_wout: Array2::zeros((config.joint_dim, symbols)),
        aux_bout: Array1::zeros(symbols),
    }
}

impl ModelParameters {
    /// Zero-valued parameters with this model's shapes (gradient container).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named views of every tensor, in a fixed order shared with
    /// [`ModelParameters::tensors_mut`]. This order defines the parameter
    /// file layout and the initialization draw order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = Vec::new();
        for (i, layer) in self.enc.iter().enumerate() {
            match layer {
                EncLayerParams::Linear { w, b } => {
                    out.push((format!("enc{i}.w"), w.view().into_dyn()));
                    out.push((format!("enc{i}.b"), b.view().into_dyn()));
                }
                EncLayerParams::TanhRnn { w_x, w_h, b } => {
                    out.push((format!("enc{i}.w_x"), w_x.view().into_dyn()));
                    out.push((format!("enc{i}.w_h"), w_h.view().into_dyn()));
                    out.push((format!("enc{i}.b"), b.view().into_dyn()));
                }
            }
        }
        out.push(("embed".into(), self.embed.view().into_dyn()));
        out.push(("dec.w_x".into(), self.dec_wx.view().into_dyn()));
        out.push(("dec.w_h".into(), self.dec_wh.view().into_dyn()));
        out.push(("dec.b".into(), self.dec_b.view().into_dyn()));
        out.push(("joint.w_enc".into(), self.joint_wenc.view().into_dyn()));
        out.push(("joint.w_dec".into(), self.joint_wdec.view().into_dyn()));
        out.push(("joint.b".into(), self.joint_b.view().into_dyn()));
        out.push(("joint.w_out".into(), self.joint_wout.view().into_dyn()));
        out.push(("joint.b_out".into(), self.joint_bout.view().into_dyn()));
        out.push(("ctc.w".into(), self.ctc_w.view().into_dyn()));
        out.push(("ctc.b".into(), self.ctc_b.view().into_dyn()));
        out.push(("lm.w".into(), self.lm_w.view().into_dyn()));
        out.push(("lm.b".into(), self.lm_b.view().into_dyn()));
        for (i, mlp) in self.aux_mlps.iter().enumerate() {
            out.push((format!("aux{i}.w1"), mlp.w1.view().into_dyn()));
            out.push((format!("aux{i}.b1"), mlp.b1.view().into_dyn()));
            out.push((format!("aux{i}.w2"), mlp.w2.view().into_dyn()));
            out.push((format!("aux{i}.b2"), mlp.b2.view().into_dyn()));
        }
        out.push(("aux.w_out".into(), self.aux_wout.view().into_dyn()));
        out.push(("aux.b_out".into(), self.aux_bout.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`ModelParameters::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = Vec::new();
        for (i, layer) in self.enc.iter_mut().enumerate() {
            match layer {
                EncLayerParams::Linear { w, b } => {
                    out.push((format!("enc{i}.w"), w.view_mut().into_dyn()));
                    out.push((format!("enc{i}.b"), b.view_mut().into_dyn()));
                }
                EncLayerParams::TanhRnn { w_x, w_h, b } => {
                    out.push((format!("enc{i}.w_x"), w_x.view_mut().into_dyn()));
                    out.push((format!("enc{i}.w_h"), w_h.view_mut().into_dyn()));
                    out.push((format!("enc{i}.b"), b.view_mut().into_dyn()));
                }
            }
        }
        out.push(("embed".into(), self.embed.view_mut().into_dyn()));
        out.push(("dec.w_x".into(), self.dec_wx.view_mut().into_dyn()));
        out.push(("dec.w_h".into(), self.dec_wh.view_mut().into_dyn()));
        out.push(("dec.b".into(), self.dec_b.view_mut().into_dyn()));
        out.push(("joint.w_enc".into(), self.joint_wenc.view_mut().into_dyn()));
        out.push(("joint.w_dec".into(), self.joint_wdec.view_mut().into_dyn()));
        out.push(("joint.b".into(), self.joint_b.view_mut().into_dyn()));
        out.push(("joint.w_out".into(), self.joint_wout.view_mut().into_dyn()));
        out.push(("joint.b_out".into(), self.joint_bout.view_mut().into_dyn()));
        out.push(("ctc.w".into(), self.ctc_w.view_mut().into_dyn()));
        out.push(("ctc.b".into(), self.ctc_b.view_mut().into_dyn()));
        out.push(("lm.w".into(), self.lm_w.view_mut().into_dyn()));
        out.push(("lm.b".into(), self.lm_b.view_mut().into_dyn()));
        for (i, mlp) in self.aux_mlps.iter_mut().enumerate() {
            out.push((format!("aux{i}.w1"), mlp.w1.view_mut().into_dyn()));
            out.push((format!("aux{i}.b1"), mlp.b1.view_mut().into_dyn()));
            out.push((format!("aux{i}.w2"), mlp.w2.view_mut().into_dyn()));
            out.push((format!("aux{i}.b2"), mlp.b2.view_mut().into_dyn()));
        }
        out.push(("aux.w_out".into(), self.aux_wout.view_mut().into_dyn()));
        out.push(("aux.b_out".into(), self.aux_bout.view_mut().into_dyn()));
        out
    }

    /// `self += alpha * other`, elementwise over matched tensors.
    pub fn scaled_add(&mut self, alpha: f64, other: &Self) {
        let theirs = other.tensors();
        for ((_, mut mine), (_, their)) in self.tensors_mut().into_iter().zip(theirs) {
            ndarray::Zip::from(&mut mine).and(&their).for_each(|m, &t| *m += alpha * t);
        }
    }

    /// `self *= alpha`.
    pub fn scale(&mut self, alpha: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * alpha);
        }
    }

    /// Sum of squares over every tensor.
    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Scales the whole set so its global norm does not exceed `max_norm`;
    /// returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.sq_norm().sqrt();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Decoder hidden state. Opaque to callers; copy freely.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub(crate) h: Array1<f64>,
}

impl DecoderState {
    /// Elementwise comparison within `tol`, for re-derivation checks.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.h.len() == other.h.len()
            && self
                .h
                .iter()
                .zip(other.h.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}
