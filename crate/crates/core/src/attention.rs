//! A minimal transformer: token embedding with sinusoidal positions, an
//! optional frozen correction, linear or softmax multi-head self-attention,
//! a GELU feedforward block with its own residual, and optional pre-layer
//! normalization.
//!
//! One layer computes `T(X) = F(A(X) + X)` where `F(Z) = Z + FFN(Z)`.
//! Attention scores are `X W_Q W_K^T X^T` with no `1/sqrt(d_h)` temperature
//! unless `score_scaling` is switched on.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::conditioning::{apply_correction, CorrectionKind, CorrectionMatrix, CorrectionSpec};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::svd::condition_number;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Linear,
    Softmax,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Linear => "linear",
            AttentionKind::Softmax => "softmax",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AttentionKind::Linear),
            "softmax" => Ok(AttentionKind::Softmax),
            other => Err(Error::invalid(format!("unknown attention kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub attention: AttentionKind,
    pub layer_norm: bool,
    /// Divide attention scores by `sqrt(d_h)`.
    pub score_scaling: bool,
    /// Feedforward hidden width as a multiple of `embed_dim`.
    pub ff_multiplier: usize,
    pub correction: Option<CorrectionSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            token_dim: 8,
            embed_dim: 32,
            heads: 4,
            layers: 2,
            attention: AttentionKind::Softmax,
            layer_norm: false,
            score_scaling: false,
            ff_multiplier: 4,
            correction: None,
        }
    }
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "seq_len",
    "token_dim",
    "embed_dim",
    "heads",
    "layers",
    "attention",
    "layer_norm",
    "score_scaling",
    "ff_multiplier",
    "correction",
    "lambda",
];

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.embed_dim * self.ff_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("seq_len", self.seq_len),
            ("token_dim", self.token_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ff_multiplier", self.ff_multiplier),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if let Some(spec) = &self.correction {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        self.write_kv(&mut out);
        out
    }

    pub(crate) fn write_kv(&self, out: &mut String) {
        let (correction, lambda) = match &self.correction {
            None => ("none", None),
            Some(s) => match s.kind {
                CorrectionKind::ExactSvd => ("exact_svd", None),
                CorrectionKind::IdentityScaled => ("identity_scaled", Some(s.lambda)),
            },
        };
        out.push_str(&format!("seq_len = {}\n", self.seq_len));
        out.push_str(&format!("token_dim = {}\n", self.token_dim));
        out.push_str(&format!("embed_dim = {}\n", self.embed_dim));
        out.push_str(&format!("heads = {}\n", self.heads));
        out.push_str(&format!("layers = {}\n", self.layers));
        out.push_str(&format!("attention = {}\n", self.attention));
        out.push_str(&format!("layer_norm = {}\n", self.layer_norm));
        out.push_str(&format!("score_scaling = {}\n", self.score_scaling));
        out.push_str(&format!("ff_multiplier = {}\n", self.ff_multiplier));
        out.push_str(&format!("correction = {correction}\n"));
        if let Some(l) = lambda {
            out.push_str(&format!("lambda = {l}\n"));
        }
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(MODEL_KEYS)?;
        Self::from_kv(&kv)
    }

    /// Reads the model keys, defaulting any that are absent.
    pub(crate) fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = Self::default();
        let lambda = kv.get::<f64>("lambda")?;
        let correction = match kv.get_str("correction").unwrap_or("none") {
            "none" => None,
            "exact_svd" => Some(CorrectionSpec::exact_svd()),
            "identity_scaled" => Some(CorrectionSpec::identity_scaled(
                lambda.unwrap_or(crate::conditioning::DEFAULT_LAMBDA),
            )?),
            other => return Err(Error::invalid(format!("unknown correction `{other}`"))),
        };
        let cfg = Self {
            seq_len: kv.get("seq_len")?.unwrap_or(d.seq_len),
            token_dim: kv.get("token_dim")?.unwrap_or(d.token_dim),
            embed_dim: kv.get("embed_dim")?.unwrap_or(d.embed_dim),
            heads: kv.get("heads")?.unwrap_or(d.heads),
            layers: kv.get("layers")?.unwrap_or(d.layers),
            attention: kv.get("attention")?.unwrap_or(d.attention),
            layer_norm: kv.get("layer_norm")?.unwrap_or(d.layer_norm),
            score_scaling: kv.get("score_scaling")?.unwrap_or(d.score_scaling),
            ff_multiplier: kv.get("ff_multiplier")?.unwrap_or(d.ff_multiplier),
            correction,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fixed sinusoidal positions: `P[pos, 2i] = sin(pos w_i)`,
/// `P[pos, 2i + 1] = cos(pos w_i)`, `w_i = 10000^(-2i/d)`.
pub fn sinusoidal_encoding(seq_len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(seq_len, dim, |pos, j| {
        let i = (j / 2) as f64;
        let w = 10000f64.powf(-2.0 * i / dim as f64);
        let angle = pos as f64 * w;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    /// `d x t`, trainable.
    pub e: Matrix,
    /// `N x d`, fixed.
    pub p: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionHead {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        if wq.shape() != wk.shape() || wq.shape() != wv.shape() {
            return Err(Error::invalid(format!(
                "head weights must share a shape, got {:?}, {:?}, {:?}",
                wq.shape(),
                wk.shape(),
                wv.shape()
            )));
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn input_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.wq.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::from_fn(1, dim, |_, _| 1.0),
            beta: Matrix::zeros(1, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub heads: Vec<AttentionHead>,
    pub ff: FeedForward,
    pub ln_attn: Option<LayerNormParams>,
    pub ln_ff: Option<LayerNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: EmbeddingLayer,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Weights i.i.d. uniform in `[-1/sqrt(d), 1/sqrt(d)]`, biases zero,
    /// layer-norm gains one. Each matrix draws from its own named stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, t, d, dh, m) = (
            config.seq_len,
            config.token_dim,
            config.embed_dim,
            config.head_dim(),
            config.ff_dim(),
        );
        let bound = 1.0 / (d as f64).sqrt();
        let draw = |name: &str, rows: usize, cols: usize| {
            Rng::stream(seed, &format!("init/{name}")).uniform_matrix(rows, cols, bound)
        };
        let embedding = EmbeddingLayer {
            e: draw("embedding.e", d, t),
            p: sinusoidal_encoding(n, d),
        };
        let layers = (0..config.layers)
            .map(|l| {
                let heads = (0..config.heads)
                    .map(|h| AttentionHead {
                        wq: draw(&format!("layer{l}.head{h}.wq"), d, dh),
                        wk: draw(&format!("layer{l}.head{h}.wk"), d, dh),
                        wv: draw(&format!("layer{l}.head{h}.wv"), d, dh),
                    })
                    .collect();
                Layer {
                    heads,
                    ff: FeedForward {
                        w1: draw(&format!("layer{l}.ff.w1"), d, m),
                        b1: Matrix::zeros(1, m),
                        w2: draw(&format!("layer{l}.ff.w2"), m, d),
                        b2: Matrix::zeros(1, d),
                    },
                    ln_attn: config.layer_norm.then(|| LayerNormParams::new(d)),
                    ln_ff: config.layer_norm.then(|| LayerNormParams::new(d)),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
        })
    }

    pub fn embed(&self, tokens: &Matrix, correction: Option<&CorrectionMatrix>) -> Result<Matrix> {
        embed(tokens, &self.embedding, correction)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Forward pass that keeps every head's output for probing.
    pub fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let mut h = x.clone();
        let mut head_outputs = Vec::with_capacity(self.layers.len());
        let mut head_probabilities = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a_in = match &layer.ln_attn {
                Some(p) => layer_norm(&h, p)?,
                None => h.clone(),
            };
            let outs = layer
                .heads
                .iter()
                .map(|head| head_forward(&a_in, head, cfg.attention, cfg.score_scaling))
                .collect::<Result<Vec<_>>>()?;
            let probs = match cfg.attention {
                AttentionKind::Softmax => layer
                    .heads
                    .iter()
                    .map(|head| attention_probabilities(&a_in, head, cfg.score_scaling).map(Some))
                    .collect::<Result<Vec<_>>>()?,
                AttentionKind::Linear => vec![None; layer.heads.len()],
            };
            let attn = Matrix::hconcat(&outs)?.add(&h)?;
            h = feed_forward_block(&attn, &layer.ff, layer.ln_ff.as_ref())?;
            head_outputs.push(outs);
            head_probabilities.push(probs);
        }
        Ok(ForwardTrace {
            head_outputs,
            head_probabilities,
            output: h,
        })
    }

    /// Named parameter matrices in a fixed order. The positional encoding
    /// is not a parameter.
    pub fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding.e".to_string(), &self.embedding.e)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.wq"), &head.wq));
                out.push((format!("layer{l}.head{h}.wk"), &head.wk));
                out.push((format!("layer{l}.head{h}.wv"), &head.wv));
            }
            if let Some(p) = &layer.ln_attn {
                out.push((format!("layer{l}.ln_attn.gamma"), &p.gamma));
                out.push((format!("layer{l}.ln_attn.beta"), &p.beta));
            }
            out.push((format!("layer{l}.ff.w1"), &layer.ff.w1));
            out.push((format!("layer{l}.ff.b1"), &layer.ff.b1));
            out.push((format!("layer{l}.ff.w2"), &layer.ff.w2));
            out.push((format!("layer{l}.ff.b2"), &layer.ff.b2));
            if let Some(p) = &layer.ln_ff {
                out.push((format!("layer{l}.ln_ff.gamma"), &p.gamma));
                out.push((format!("layer{l}.ln_ff.beta"), &p.beta));
            }
        }
        out
    }

    /// Mutable view of [`Model::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding.e];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.wq);
                out.push(&mut head.wk);
                out.push(&mut head.wv);
            }
            if let Some(p) = &mut layer.ln_attn {
                out.push(&mut p.gamma);
                out.push(&mut p.beta);
            }
            out.push(&mut layer.ff.w1);
            out.push(&mut layer.ff.b1);
            out.push(&mut layer.ff.w2);
            out.push(&mut layer.ff.b2);
            if let Some(p) = &mut layer.ln_ff {
                out.push(&mut p.gamma);
                out.push(&mut p.beta);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[layer][head]`, each `N x d_h`.
    pub head_outputs: Vec<Vec<Matrix>>,
    /// `[layer][head]` row-softmaxed `N x N` factors; `None` for linear
    /// attention.
    pub head_probabilities: Vec<Vec<Option<Matrix>>>,
    pub output: Matrix,
}

/// `X = tokens E^T + P`, then `+ C` when a correction is given.
pub fn embed(tokens: &Matrix, layer: &EmbeddingLayer, correction: Option<&CorrectionMatrix>) -> Result<Matrix> {
    let x = tokens.matmul(&layer.e.transpose())?.add(&layer.p)?;
    match correction {
        Some(c) => apply_correction(&x, c),
        None => Ok(x),
    }
}

fn check_input(x: &Matrix, head: &AttentionHead) -> Result<()> {
    if x.cols() != head.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: x.shape(),
            right: head.wq.shape(),
        });
    }
    Ok(())
}

fn scores(x: &Matrix, head: &AttentionHead, scaled: bool) -> Result<Matrix> {
    check_input(x, head)?;
    let q = x.matmul(&head.wq)?;
    let k = x.matmul(&head.wk)?;
    let s = q.matmul(&k.transpose())?;
    if scaled {
        s.scale(1.0 / (head.head_dim() as f64).sqrt())
    } else {
        Ok(s)
    }
}

/// `LA(X) = X W_Q W_K^T X^T X W_V`.
pub fn linear_attention(x: &Matrix, head: &AttentionHead) -> Result<Matrix> {
    let s = scores(x, head, false)?;
    s.matmul(&x.matmul(&head.wv)?)
}

/// `softmax(X W_Q W_K^T X^T)`, row-wise.
pub fn attention_probabilities(x: &Matrix, head: &AttentionHead, scaled: bool) -> Result<Matrix> {
    Ok(scores(x, head, scaled)?.softmax_rows())
}

/// `A(X) = softmax(X W_Q W_K^T X^T) X W_V`.
pub fn softmax_attention(x: &Matrix, head: &AttentionHead, scaled: bool) -> Result<Matrix> {
    attention_probabilities(x, head, scaled)?.matmul(&x.matmul(&head.wv)?)
}

fn head_forward(x: &Matrix, head: &AttentionHead, kind: AttentionKind, scaled: bool) -> Result<Matrix> {
    match kind {
        AttentionKind::Linear if scaled => {
            scores(x, head, true)?.matmul(&x.matmul(&head.wv)?)
        }
        AttentionKind::Linear => linear_attention(x, head),
        AttentionKind::Softmax => softmax_attention(x, head, scaled),
    }
}

/// `[A_1, ..., A_h]`.
pub fn multi_head(x: &Matrix, heads: &[AttentionHead], kind: AttentionKind, scaled: bool) -> Result<Matrix> {
    if heads.is_empty() {
        return Err(Error::invalid("multi_head needs at least one head"));
    }
    let width: usize = heads.iter().map(AttentionHead::head_dim).sum();
    if width != x.cols() {
        return Err(Error::invalid(format!(
            "head widths sum to {width}, input has {} columns",
            x.cols()
        )));
    }
    let outs = heads
        .iter()
        .map(|h| head_forward(x, h, kind, scaled))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hconcat(&outs)
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `GELU(Z W_1 + b_1) W_2 + b_2`, without the residual.
pub fn feed_forward(z: &Matrix, ff: &FeedForward) -> Result<Matrix> {
    let hidden = z.matmul(&ff.w1)?.add_row(&ff.b1)?.map("gelu", gelu)?;
    hidden.matmul(&ff.w2)?.add_row(&ff.b2)
}

fn feed_forward_block(z: &Matrix, ff: &FeedForward, ln: Option<&LayerNormParams>) -> Result<Matrix> {
    let inner = match ln {
        Some(p) => feed_forward(&layer_norm(z, p)?, ff)?,
        None => feed_forward(z, ff)?,
    };
    z.add(&inner)
}

/// Per-row normalization to zero mean and unit variance, then
/// `gamma * . + beta`.
pub fn layer_norm(x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    let d = x.cols();
    let mut data = Vec::with_capacity(x.rows() * d);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter().enumerate() {
            data.push((v - mean) * rstd * p.gamma[(0, j)] + p.beta[(0, j)]);
        }
    }
    Matrix::new(x.rows(), d, data)
}

/// One transformer layer, `F(A(X) + X)`.
pub fn layer_forward(x: &Matrix, layer: &Layer, kind: AttentionKind, scaled: bool) -> Result<Matrix> {
    let a_in = match &layer.ln_attn {
        Some(p) => layer_norm(x, p)?,
        None => x.clone(),
    };
    let attn = multi_head(&a_in, &layer.heads, kind, scaled)?.add(x)?;
    feed_forward_block(&attn, &layer.ff, layer.ln_ff.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadProbe {
    pub kappa_output: Option<f64>,
    /// Softmax attention only.
    pub kappa_probabilities: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProbe {
    pub heads: Vec<HeadProbe>,
    pub mean_kappa: Option<f64>,
}

/// Condition numbers along one forward pass. `None` marks a rank-deficient
/// (skipped) entry; means ignore skipped entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub kappa_tokens: Option<f64>,
    pub layers: Vec<LayerProbe>,
    /// Mean over the first layer's heads.
    pub layer1_mean: Option<f64>,
    /// Mean over every head of every layer.
    pub all_layers_mean: Option<f64>,
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn condition_probe(model: &Model, x_embedded: &Matrix) -> Result<ProbeRecord> {
    let kappa_tokens = condition_number(x_embedded)?.finite_kappa();
    let trace = model.forward_trace(x_embedded)?;
    let mut layers = Vec::with_capacity(trace.head_outputs.len());
    for (outs, probs) in trace.head_outputs.iter().zip(&trace.head_probabilities) {
        let heads = outs
            .iter()
            .zip(probs)
            .map(|(o, p)| {
                Ok(HeadProbe {
                    kappa_output: condition_number(o)?.finite_kappa(),
                    kappa_probabilities: match p {
                        Some(p) => condition_number(p)?.finite_kappa(),
                        None => None,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_kappa = mean(heads.iter().filter_map(|h| h.kappa_output));
        layers.push(LayerProbe { heads, mean_kappa });
    }
    let layer1_mean = layers.first().and_then(|l| l.mean_kappa);
    let all_layers_mean = mean(layers.iter().flat_map(|l| l.heads.iter().filter_map(|h| h.kappa_output)));
    Ok(ProbeRecord {
        kappa_tokens,
        layers,
        layer1_mean,
        all_layers_mean,
    })
}
