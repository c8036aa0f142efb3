//! The transformer forward pass recorded on a [`Tape`].

use crate::attention::{AttentionKind, Model};
use crate::conditioning::CorrectionMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::tape::{Tape, Var};

struct HeadVars {
    wq: Var,
    wk: Var,
    wv: Var,
}

struct LayerVars {
    heads: Vec<HeadVars>,
    ln_attn: Option<(Var, Var)>,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln_ff: Option<(Var, Var)>,
}

/// Parameter leaves on a tape, in the order of [`Model::parameters`].
pub struct ParamVars {
    e: Var,
    p: Var,
    correction: Option<Var>,
    layers: Vec<LayerVars>,
    ordered: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, model: &Model, correction: Option<&CorrectionMatrix>) -> Self {
        let mut ordered = Vec::new();
        let mut param = |tape: &mut Tape, m: &Matrix| {
            let v = tape.param(m.clone());
            ordered.push(v);
            v
        };
        let e = param(tape, &model.embedding.e);
        let mut layers = Vec::with_capacity(model.layers.len());
        for layer in &model.layers {
            let heads = layer
                .heads
                .iter()
                .map(|h| HeadVars {
                    wq: param(tape, &h.wq),
                    wk: param(tape, &h.wk),
                    wv: param(tape, &h.wv),
                })
                .collect();
            let ln_attn = layer.ln_attn.as_ref().map(|p| (param(tape, &p.gamma), param(tape, &p.beta)));
            let w1 = param(tape, &layer.ff.w1);
            let b1 = param(tape, &layer.ff.b1);
            let w2 = param(tape, &layer.ff.w2);
            let b2 = param(tape, &layer.ff.b2);
            let ln_ff = layer.ln_ff.as_ref().map(|p| (param(tape, &p.gamma), param(tape, &p.beta)));
            layers.push(LayerVars {
                heads,
                ln_attn,
                w1,
                b1,
                w2,
                b2,
                ln_ff,
            });
        }
        let p = tape.constant(model.embedding.p.clone());
        let correction = correction.map(|c| tape.constant(c.matrix().clone()));
        Self {
            e,
            p,
            correction,
            layers,
            ordered,
        }
    }

    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }

    pub fn correction(&self) -> Option<Var> {
        self.correction
    }
}

fn maybe_ln(tape: &mut Tape, x: Var, ln: Option<(Var, Var)>) -> Result<Var> {
    match ln {
        Some((g, b)) => tape.layer_norm(x, g, b),
        None => Ok(x),
    }
}

/// Records `T_L(...T_1(tokens E^T + P [+ C]))` and returns the output node.
pub fn forward(tape: &mut Tape, model: &Model, vars: &ParamVars, tokens: &Matrix) -> Result<Var> {
    let cfg = &model.config;
    let tok = tape.constant(tokens.clone());
    let et = tape.transpose(vars.e);
    let x = tape.matmul(tok, et)?;
    let mut h = tape.add(x, vars.p)?;
    if let Some(c) = vars.correction {
        h = tape.add(h, c)?;
    }
    for layer in &vars.layers {
        let a_in = maybe_ln(tape, h, layer.ln_attn)?;
        let mut outs = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let q = tape.matmul(a_in, head.wq)?;
            let k = tape.matmul(a_in, head.wk)?;
            let kt = tape.transpose(k);
            let mut s = tape.matmul(q, kt)?;
            if cfg.score_scaling {
                s = tape.scale(s, 1.0 / (cfg.head_dim() as f64).sqrt())?;
            }
            if cfg.attention == AttentionKind::Softmax {
                s = tape.softmax_rows(s);
            }
            let v = tape.matmul(a_in, head.wv)?;
            outs.push(tape.matmul(s, v)?);
        }
        let cat = tape.hconcat(&outs)?;
        let z = tape.add(cat, h)?;
        let f_in = maybe_ln(tape, z, layer.ln_ff)?;
        let hidden = tape.matmul(f_in, layer.w1)?;
        let hidden = tape.add_row(hidden, layer.b1)?;
        let hidden = tape.gelu(hidden)?;
        let out = tape.matmul(hidden, layer.w2)?;
        let out = tape.add_row(out, layer.b2)?;
        h = tape.add(z, out)?;
    }
    Ok(h)
}

/// A batch of `(tokens, target)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Matrix>,
    pub targets: Vec<Matrix>,
}

impl Batch {
    pub fn new(tokens: Vec<Matrix>, targets: Vec<Matrix>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != targets.len() {
            return Err(Error::invalid(format!(
                "batch needs matching non-empty inputs and targets, got {} and {}",
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Self { tokens, targets })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Gradients of the batch loss, aligned with [`Model::parameters`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub params: Vec<(String, Matrix)>,
    /// Gradient reaching the correction; all zeros because it is a
    /// constant on the tape.
    pub correction: Option<Matrix>,
}

/// Mean over the batch of per-sample mean squared error.
pub fn batch_loss(model: &Model, batch: &Batch, correction: Option<&CorrectionMatrix>) -> Result<f64> {
    let mut total = 0.0;
    for (tokens, target) in batch.tokens.iter().zip(&batch.targets) {
        let out = model.forward(&model.embed(tokens, correction)?)?;
        let diff = out.sub(target)?;
        total += diff.as_slice().iter().map(|v| v * v).sum::<f64>() / diff.as_slice().len() as f64;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok(loss)
}

/// Reverse-mode gradients of the mean squared error loss.
pub fn backward(model: &Model, batch: &Batch, correction: Option<&CorrectionMatrix>) -> Result<Gradients> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, model, correction);
    let mut losses = Vec::with_capacity(batch.len());
    for (tokens, target) in batch.tokens.iter().zip(&batch.targets) {
        let out = forward(&mut tape, model, &vars, tokens)?;
        losses.push(tape.mse(out, target)?);
    }
    let loss_var = tape.mean_scalars(&losses)?;
    let loss = tape.value(loss_var)[(0, 0)];
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(loss_var)?;
    let params = model
        .parameters()
        .into_iter()
        .zip(vars.ordered())
        .map(|((name, _), v)| (name, grads.wrt(*v)))
        .collect();
    Ok(Gradients {
        loss,
        params,
        correction: vars.correction().map(|c| grads.wrt(c)),
    })
}
