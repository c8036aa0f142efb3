//! Analytic gradients against central finite differences.

use serde::Serialize;

use crate::attention::Model;
use crate::conditioning::CorrectionMatrix;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::rng::Rng;

use super::graph::{backward, Batch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter matrix; smaller matrices are
    /// checked exhaustively.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coordinates: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckGroup {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub max_rel_error: f64,
    /// Largest gradient magnitude reported for the frozen correction.
    pub correction_gradient: Option<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

pub fn gradient_check(
    model: &Model,
    batch: &Batch,
    correction: Option<&CorrectionMatrix>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let grads = backward(model, batch, correction)?;
    let mut groups = Vec::with_capacity(grads.params.len());
    for (idx, (name, grad)) in grads.params.iter().enumerate() {
        let (rows, cols) = grad.shape();
        let total = rows * cols;
        let coords: Vec<usize> = if total <= opts.coordinates {
            (0..total).collect()
        } else {
            let mut rng = Rng::stream(opts.seed, &format!("gradcheck/{name}"));
            let mut picked = Vec::with_capacity(opts.coordinates);
            while picked.len() < opts.coordinates {
                let c = rng.below(total);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked
        };
        let (mut max_rel, mut max_abs): (f64, f64) = (0.0, 0.0);
        for &flat in &coords {
            let (i, j) = (flat / cols, flat % cols);
            let v = model.parameters()[idx].1[(i, j)];
            let (up, down) = (v + opts.step, v - opts.step);
            let outputs = |value: f64| -> Result<Vec<Matrix>> {
                let mut m = model.clone();
                let p = &mut m.parameters_mut()[idx];
                **p = p.with_entry(i, j, value)?;
                batch
                    .tokens
                    .iter()
                    .map(|t| m.forward(&m.embed(t, correction)?))
                    .collect()
            };
            let (plus, minus) = (outputs(up)?, outputs(down)?);
            // L(+) - L(-) summed as (o+ - o-)(o+ + o- - 2t) to avoid
            // cancelling two nearly equal losses.
            let mut diff = 0.0;
            for ((p, m), t) in plus.iter().zip(&minus).zip(&batch.targets) {
                let n = p.as_slice().len() as f64;
                let s: f64 = p
                    .as_slice()
                    .iter()
                    .zip(m.as_slice())
                    .zip(t.as_slice())
                    .map(|((a, b), y)| (a - b) * (a + b - 2.0 * y))
                    .sum();
                diff += s / n;
            }
            let numeric = diff / batch.len() as f64 / (up - down);
            max_rel = max_rel.max(relative_error(grad[(i, j)], numeric));
            max_abs = max_abs.max((grad[(i, j)] - numeric).abs());
        }
        groups.push(GradCheckGroup {
            name: name.clone(),
            coordinates: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            max_abs_gradient: grad.max_abs(),
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        correction_gradient: grads.correction.map(|c| c.max_abs()),
    })
}
