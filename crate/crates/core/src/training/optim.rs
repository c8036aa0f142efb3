//! SGD and AdamW with decoupled weight decay.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            ..Self::adamw(learning_rate)
        }
    }

    pub fn adamw(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && [self.learning_rate, self.weight_decay, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for one parameter list.
pub struct Optimizer {
    config: OptimizerConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates `params` in place from `grads` (same order and shapes).
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter and gradient counts differ"));
        }
        let c = self.config;
        self.step += 1;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.as_slice().len()]).collect();
            self.v = self.m.clone();
        }
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (idx, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let (rows, cols) = p.shape();
            let mut data = p.as_slice().to_vec();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(g.as_slice()) {
                        *w -= c.learning_rate * (g + c.weight_decay * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                    for (k, (w, g)) in data.iter_mut().zip(g.as_slice()).enumerate() {
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                        let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                        *w -= c.learning_rate * (update + c.weight_decay * *w);
                    }
                }
            }
            *p = Matrix::new(rows, cols, data).map_err(|_| Error::NonFinite { op: "optimizer step" })?;
        }
        Ok(())
    }
}
