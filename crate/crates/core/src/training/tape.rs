//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Operations are recorded in evaluation order on a [`Tape`]; `backward`
//! walks the tape in reverse and accumulates adjoints for every node that
//! depends on a parameter leaf. Constant leaves (inputs, positional
//! encodings, frozen corrections) never receive a gradient.

use crate::attention::gelu_derivative;
use crate::attention::{gelu, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    HConcat(Vec<Var>),
    /// `sum((x - target)^2) / len`, a `1 x 1` node.
    Mse { x: Var, target: Matrix },
    /// Mean of `1 x 1` nodes.
    MeanScalars(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let ng = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, s), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let ng = self.needs(&[a]);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map("gelu", gelu)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Gelu(a), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let xhat = Matrix::new(n, d, xhat)?;
        let g = self.value(gamma);
        let b = self.value(beta);
        let value = Matrix::from_fn(n, d, |i, j| xhat[(i, j)] * g[(0, j)] + b[(0, j)]);
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<Matrix> = parts.iter().map(|v| self.value(*v).clone()).collect();
        let value = Matrix::hconcat(&mats)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::HConcat(parts.to_vec()), ng))
    }

    pub fn mse(&mut self, x: Var, target: &Matrix) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.as_slice().len() as f64;
        let loss = xv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        if xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: xv.shape(),
                right: target.shape(),
            });
        }
        let value = Matrix::new(1, 1, vec![loss]).map_err(|_| Error::NonFinite { op: "loss" })?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Mse {
                x,
                target: target.clone(),
            },
            ng,
        ))
    }

    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("mean of zero terms"));
        }
        let sum: f64 = parts.iter().map(|v| self.value(*v)[(0, 0)]).sum();
        let value = Matrix::new(1, 1, vec![sum / parts.len() as f64]).map_err(|_| Error::NonFinite { op: "loss" })?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::MeanScalars(parts.to_vec()), ng))
    }

    /// Adjoints of the `1 x 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::new(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&self.nodes, &mut grads, *a, ga)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&self.nodes, &mut grads, *b, gb)?;
                    }
                }
                Op::Transpose(a) => accumulate(&self.nodes, &mut grads, *a, g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&self.nodes, &mut grads, *a, g.clone())?;
                    accumulate(&self.nodes, &mut grads, *b, g.clone())?;
                }
                Op::AddRow(x, bias) => {
                    accumulate(&self.nodes, &mut grads, *bias, g.sum_rows())?;
                    accumulate(&self.nodes, &mut grads, *x, g.clone())?;
                }
                Op::Scale(a, s) => accumulate(&self.nodes, &mut grads, *a, g.scale(*s)?)?,
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (n, m) = y.shape();
                    let mut out = Vec::with_capacity(n * m);
                    for i in 0..n {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                    }
                    accumulate(&self.nodes, &mut grads, *a, Matrix::new(n, m, out)?)?;
                }
                Op::Gelu(a) => {
                    let d = self.value(*a).map("gelu'", gelu_derivative)?;
                    accumulate(&self.nodes, &mut grads, *a, g.hadamard(&d)?)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (n, d) = xhat.shape();
                    accumulate(&self.nodes, &mut grads, *beta, g.sum_rows())?;
                    accumulate(&self.nodes, &mut grads, *gamma, g.hadamard(xhat)?.sum_rows())?;
                    let gam = self.value(*gamma);
                    let mut out = Vec::with_capacity(n * d);
                    for i in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|j| g[(i, j)] * gam[(0, j)]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        out.extend(
                            (0..d).map(|j| rstd[i] * (dxhat[j] - mean_d - xhat[(i, j)] * mean_dx)),
                        );
                    }
                    accumulate(&self.nodes, &mut grads, *x, Matrix::new(n, d, out)?)?;
                }
                Op::HConcat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&self.nodes, &mut grads, *p, g.columns(start, start + w)?)?;
                        start += w;
                    }
                }
                Op::Mse { x, target } => {
                    let xv = self.value(*x);
                    let scale = 2.0 * g[(0, 0)] / xv.as_slice().len() as f64;
                    accumulate(&self.nodes, &mut grads, *x, xv.sub(target)?.scale(scale)?)?;
                }
                Op::MeanScalars(parts) => {
                    let share = g[(0, 0)] / parts.len() as f64;
                    for p in parts {
                        accumulate(&self.nodes, &mut grads, *p, Matrix::new(1, 1, vec![share])?)?;
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    if !nodes[v.0].needs_grad {
        return Ok(());
    }
    grads[v.0] = Some(match grads[v.0].take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`; all zeros for constants and
    /// for nodes the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn has_gradient(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
