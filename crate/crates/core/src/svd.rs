//! Thin singular value decomposition by one-sided (Hestenes) Jacobi
//! rotations, plus the condition number built on top of it.
//!
//! For an `m x n` input with `m >= n` the columns of a working copy are
//! rotated pairwise until every pair is orthogonal to within the relative
//! tolerance; the accumulated rotations form `V`, the column norms are the
//! singular values and the normalized columns are `U`. Wide inputs are
//! handled through the transpose. Column pairs are visited in a fixed
//! cyclic order, so the result depends only on the input bytes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `sigma_k / sigma_1` below this marks a matrix as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct SvdOptions {
    /// Relative orthogonality `|a_p . a_q| / (|a_p| |a_q|)` at which a
    /// column pair counts as converged.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-13,
            max_sweeps: 60,
        }
    }
}

/// `a = u * diag(sigma) * vt` with `k = min(rows, cols)` thin factors.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.vt).expect("svd factors have consistent shapes")
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    svd_with(a, SvdOptions::default())
}

pub fn svd_with(a: &Matrix, opts: SvdOptions) -> Result<SvdResult> {
    if a.rows() >= a.cols() {
        let (u, sigma, v) = jacobi_tall(a, opts)?;
        Ok(SvdResult {
            u,
            sigma,
            vt: v.transpose(),
        })
    } else {
        // a^T = U' S V'^T  =>  a = V' S U'^T
        let (u, sigma, v) = jacobi_tall(&a.transpose(), opts)?;
        Ok(SvdResult {
            u: v,
            sigma,
            vt: u.transpose(),
        })
    }
}

/// Singular values in non-increasing order.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.sigma)
}

/// Returns `(U, sigma, V)` for a tall (`m >= n`) matrix; `U` is `m x n`,
/// `V` is `n x n`.
fn jacobi_tall(a: &Matrix, opts: SvdOptions) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // column-major working copies
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = a[(i, j)];
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut converged = n == 1;
    let mut residual = 0.0;
    for _ in 0..opts.max_sweeps {
        if converged {
            break;
        }
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &w[p * m..(p + 1) * m];
                    let cq = &w[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(off);
                if off <= opts.tolerance {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(&mut w, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        converged = residual <= opts.tolerance;
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: opts.max_sweeps,
            residual,
        });
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| w[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: ties keep column order
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_out = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        let col = &w[src * m..(src + 1) * m];
        if s > 0.0 && s > sigma_max * 1e-150 {
            u_cols.push(col.iter().map(|x| x / s).collect());
        } else {
            u_cols.push(complete_basis(&u_cols, m));
        }
        for i in 0..n {
            v_out[i * n + dst] = v[src * n + i];
        }
    }
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let v = Matrix::new(n, n, v_out)?;
    Ok((u, sigma, v))
}

fn rotate(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let cp = &mut head[p * len..(p + 1) * len];
    let cq = &mut tail[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Unit vector orthogonal to every vector in `basis`, taken from the
/// standard basis vector with the largest residual after two rounds of
/// Gram-Schmidt.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut r = vec![0.0; m];
        r[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let dot: f64 = b.iter().zip(&r).map(|(x, y)| x * y).sum();
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= dot * bi;
                }
            }
        }
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
            best = Some((norm, r));
        }
    }
    let (norm, r) = best.expect("m >= 1");
    r.into_iter().map(|x| x / norm).collect()
}

/// Condition number `sigma_1 / sigma_k`.
///
/// When `sigma_k / sigma_1 < RANK_TOLERANCE` (or the matrix is zero) the
/// report is flagged rank deficient and `kappa` is `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReport {
    pub kappa: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rank_deficient: bool,
}

impl ConditionReport {
    pub fn from_sigma(sigma: &[f64]) -> Self {
        let sigma_max = sigma[0];
        let sigma_min = *sigma.last().expect("non-empty spectrum");
        let rank_deficient = sigma_max <= 0.0 || sigma_min / sigma_max < RANK_TOLERANCE;
        let kappa = if rank_deficient {
            f64::INFINITY
        } else {
            sigma_max / sigma_min
        };
        Self {
            kappa,
            sigma_max,
            sigma_min,
            rank_deficient,
        }
    }

    /// `Some(kappa)` unless rank deficient.
    pub fn finite_kappa(&self) -> Option<f64> {
        (!self.rank_deficient).then_some(self.kappa)
    }

    /// The condition number, or a `RankDeficient` error naming `what`.
    pub fn require_full_rank(&self, what: &str) -> Result<f64> {
        if self.rank_deficient {
            Err(Error::RankDeficient {
                what: what.to_string(),
                ratio: if self.sigma_max > 0.0 {
                    self.sigma_min / self.sigma_max
                } else {
                    0.0
                },
            })
        } else {
            Ok(self.kappa)
        }
    }
}

pub fn condition_number(a: &Matrix) -> Result<ConditionReport> {
    Ok(ConditionReport::from_sigma(&svd(a)?.sigma))
}
