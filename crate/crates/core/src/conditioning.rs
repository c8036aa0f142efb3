//! Correction matrices for embedded tokens and the conditioning measures
//! of linear and softmax self-attention.
//!
//! Two corrections are supported:
//!
//! * [`exact_correction`] builds `C = sigma_1 * U V^T` from the thin SVD
//!   `X = U S V^T`, so `X + C = U (S + sigma_1 I) V^T` has singular values
//!   `sigma_1 + sigma_l` and `kappa(X + C) = 2 sigma_1 / (sigma_1 + sigma_k) <= 2`.
//!   Using the thin factors is equivalent to the full `N x N` / `d x d`
//!   construction because the padded singular directions carry zero weight.
//! * [`identity_correction`] is `lambda * I_k`, the `N x d` matrix with
//!   `lambda` on its leading `k = min(N, d)` diagonal. It needs no SVD.
//!
//! The `mu` measures are the products of condition numbers that upper bound
//! the condition number of an attention head's output.

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{attention_probabilities, linear_attention, softmax_attention, AttentionHead};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::svd::{condition_number, svd, ConditionReport};

pub const DEFAULT_LAMBDA: f64 = 10.0;

/// Relative slack granted to computed inequalities.
pub const BOUND_SLACK: f64 = 1e-9;

/// `sigma_k(X)` below this counts as "much less than one".
pub const SMALL_SIGMA_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    ExactSvd,
    IdentityScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionSpec {
    pub kind: CorrectionKind,
    /// Only meaningful for `IdentityScaled`.
    pub lambda: f64,
}

impl CorrectionSpec {
    pub fn exact_svd() -> Self {
        Self {
            kind: CorrectionKind::ExactSvd,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn identity_scaled(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            kind: CorrectionKind::IdentityScaled,
            lambda,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CorrectionKind::ExactSvd => Ok(()),
            CorrectionKind::IdentityScaled => check_lambda(self.lambda),
        }
    }

    /// Builds the correction for tokens shaped like `x`. Only `ExactSvd`
    /// reads the entries of `x`.
    pub fn build(&self, x: &Matrix) -> Result<CorrectionMatrix> {
        match self.kind {
            CorrectionKind::ExactSvd => exact_correction(x),
            CorrectionKind::IdentityScaled => identity_correction(x.rows(), x.cols(), self.lambda),
        }
    }
}

impl Default for CorrectionSpec {
    fn default() -> Self {
        Self {
            kind: CorrectionKind::IdentityScaled,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda must be a positive finite number, got {lambda}")))
    }
}

/// A correction fixed at construction. There is no mutable access to the
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionMatrix {
    c: Matrix,
    spec: CorrectionSpec,
}

impl CorrectionMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn spec(&self) -> CorrectionSpec {
        self.spec
    }

    pub fn frozen(&self) -> bool {
        true
    }

    pub fn shape(&self) -> (usize, usize) {
        self.c.shape()
    }
}

pub fn exact_correction(x: &Matrix) -> Result<CorrectionMatrix> {
    let dec = svd(x)?;
    ConditionReport::from_sigma(&dec.sigma).require_full_rank("embedded tokens")?;
    let s1 = dec.sigma[0];
    let scaled_u = dec.u.scale(s1)?;
    Ok(CorrectionMatrix {
        c: scaled_u.matmul(&dec.vt)?,
        spec: CorrectionSpec::exact_svd(),
    })
}

pub fn identity_correction(n: usize, d: usize, lambda: f64) -> Result<CorrectionMatrix> {
    let spec = CorrectionSpec::identity_scaled(lambda)?;
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!("correction shape {n}x{d} has a zero dimension")));
    }
    Ok(CorrectionMatrix {
        c: Matrix::eye(n, d).scale(lambda)?,
        spec,
    })
}

pub fn apply_correction(x: &Matrix, c: &CorrectionMatrix) -> Result<Matrix> {
    x.add(&c.c)
}

/// Adds the same correction to every sample.
pub fn apply_correction_batch(xs: &[Matrix], c: &CorrectionMatrix) -> Result<Vec<Matrix>> {
    xs.iter().map(|x| apply_correction(x, c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearMu {
    pub mu: f64,
    pub kappa_x: f64,
    pub kappa_wq: f64,
    pub kappa_wk: f64,
    pub kappa_wv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SoftmaxMu {
    pub mu: f64,
    pub kappa_softmax_factor: f64,
    pub kappa_x: f64,
    pub kappa_wv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MuReport {
    pub mu_linear: f64,
    pub mu_softmax: f64,
    pub kappa_x: f64,
    pub kappa_wq: f64,
    pub kappa_wk: f64,
    pub kappa_wv: f64,
    pub kappa_softmax_factor: f64,
}

/// `kappa(W_Q) kappa(W_K) kappa(W_V) kappa(X)^3`.
pub fn mu_linear(x: &Matrix, head: &AttentionHead) -> Result<LinearMu> {
    let kappa_x = condition_number(x)?.require_full_rank("x")?;
    let kappa_wq = condition_number(&head.wq)?.require_full_rank("wq")?;
    let kappa_wk = condition_number(&head.wk)?.require_full_rank("wk")?;
    let kappa_wv = condition_number(&head.wv)?.require_full_rank("wv")?;
    Ok(LinearMu {
        mu: kappa_wq * kappa_wk * kappa_wv * kappa_x.powi(3),
        kappa_x,
        kappa_wq,
        kappa_wk,
        kappa_wv,
    })
}

/// `kappa(softmax(X W_Q W_K^T X^T)) kappa(X) kappa(W_V)`.
pub fn mu_softmax(x: &Matrix, head: &AttentionHead) -> Result<SoftmaxMu> {
    let kappa_x = condition_number(x)?.require_full_rank("x")?;
    let kappa_wv = condition_number(&head.wv)?.require_full_rank("wv")?;
    let probs = attention_probabilities(x, head, false)?;
    let kappa_softmax_factor = condition_number(&probs)?.require_full_rank("softmax factor")?;
    Ok(SoftmaxMu {
        mu: kappa_softmax_factor * kappa_x * kappa_wv,
        kappa_softmax_factor,
        kappa_x,
        kappa_wv,
    })
}

pub fn mu_report(x: &Matrix, head: &AttentionHead) -> Result<MuReport> {
    let lin = mu_linear(x, head)?;
    let soft = mu_softmax(x, head)?;
    Ok(MuReport {
        mu_linear: lin.mu,
        mu_softmax: soft.mu,
        kappa_x: lin.kappa_x,
        kappa_wq: lin.kappa_wq,
        kappa_wk: lin.kappa_wk,
        kappa_wv: lin.kappa_wv,
        kappa_softmax_factor: soft.kappa_softmax_factor,
    })
}

/// Outcome of a check that needs full-rank inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Checked<T> {
    Checked(T),
    Skipped { reason: String },
}

impl<T> Checked<T> {
    pub fn checked(self) -> Option<T> {
        match self {
            Checked::Checked(t) => Some(t),
            Checked::Skipped { .. } => None,
        }
    }

    pub fn is_skipped(&self) -> bool {
        matches!(self, Checked::Skipped { .. })
    }
}

/// Runs `f`, turning a rank-deficiency error into a skipped record.
fn skip_rank_deficient<T>(f: impl FnOnce() -> Result<T>) -> Result<Checked<T>> {
    match f() {
        Ok(t) => Ok(Checked::Checked(t)),
        Err(Error::RankDeficient { what, ratio }) => Ok(Checked::Skipped {
            reason: format!("{what} is rank deficient (sigma_min/sigma_max = {ratio:e})"),
        }),
        Err(e) => Err(e),
    }
}

fn within(actual: f64, bound: f64) -> bool {
    actual <= bound * (1.0 + BOUND_SLACK)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionBoundRecord {
    pub kappa_linear_attention: f64,
    pub mu_linear: f64,
    pub linear_pass: bool,
    pub kappa_softmax_attention: f64,
    pub mu_softmax: f64,
    pub softmax_pass: bool,
}

impl AttentionBoundRecord {
    pub fn pass(&self) -> bool {
        self.linear_pass && self.softmax_pass
    }
}

/// Compares the actual condition numbers of `LA(X)` and `A(X)` against
/// their `mu` upper bounds.
///
/// The bounds come from `kappa(AB) <= kappa(A) kappa(B)`, which is a
/// theorem when every factor in the chain is at least as tall as it is
/// wide (for example `N >= d` with square weights). For other shapes the
/// record can legitimately report `pass = false`.
pub fn verify_attention_bounds(x: &Matrix, head: &AttentionHead) -> Result<Checked<AttentionBoundRecord>> {
    skip_rank_deficient(|| {
        let mu = mu_report(x, head)?;
        let kappa_la = condition_number(&linear_attention(x, head)?)?.require_full_rank("LA(X)")?;
        let kappa_a = condition_number(&softmax_attention(x, head, false)?)?.require_full_rank("A(X)")?;
        Ok(AttentionBoundRecord {
            kappa_linear_attention: kappa_la,
            mu_linear: mu.mu_linear,
            linear_pass: within(kappa_la, mu.mu_linear),
            kappa_softmax_attention: kappa_a,
            mu_softmax: mu.mu_softmax,
            softmax_pass: within(kappa_a, mu.mu_softmax),
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityRecord {
    pub kind: CorrectionKind,
    pub lambda: f64,
    pub kappa_x_before: f64,
    pub kappa_x_after: f64,
    pub mu_linear_before: f64,
    pub mu_linear_after: f64,
    pub kappa_softmax_factor_before: f64,
    pub kappa_softmax_factor_after: f64,
    pub mu_softmax_before: f64,
    pub mu_softmax_after: f64,
    /// `kappa(softmax((X+C) W_Q W_K^T (X+C)^T)) <= kappa(softmax(X W_Q W_K^T X^T))`.
    pub softmax_assumption_holds: bool,
    /// `mu_linear` did not increase. Guaranteed for `ExactSvd` only.
    pub linear_pass: bool,
    /// The assumption implies that `mu_softmax` did not increase.
    pub softmax_pass: bool,
}

/// Measures `mu` before and after correcting `x`.
pub fn verify_monotonicity(
    x: &Matrix,
    head: &AttentionHead,
    spec: CorrectionSpec,
) -> Result<Checked<MonotonicityRecord>> {
    spec.validate()?;
    skip_rank_deficient(|| {
        let before = mu_report(x, head)?;
        let c = spec.build(x)?;
        let xc = apply_correction(x, &c)?;
        let after = mu_report(&xc, head)?;
        let assumption = after.kappa_softmax_factor <= before.kappa_softmax_factor;
        let softmax_decreased = within(after.mu_softmax, before.mu_softmax);
        Ok(MonotonicityRecord {
            kind: spec.kind,
            lambda: spec.lambda,
            kappa_x_before: before.kappa_x,
            kappa_x_after: after.kappa_x,
            mu_linear_before: before.mu_linear,
            mu_linear_after: after.mu_linear,
            kappa_softmax_factor_before: before.kappa_softmax_factor,
            kappa_softmax_factor_after: after.kappa_softmax_factor,
            mu_softmax_before: before.mu_softmax,
            mu_softmax_after: after.mu_softmax,
            softmax_assumption_holds: assumption,
            linear_pass: within(after.mu_linear, before.mu_linear),
            softmax_pass: !assumption || softmax_decreased,
        })
    })
}

/// How `lambda * I_k` conditions `x`, with the Weyl-inequality bound
/// `kappa(X + lambda I_k) <= (sigma_1 + lambda) / (lambda - sigma_1)`,
/// valid when `lambda > sigma_1(X)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeylDiagnostic {
    pub lambda: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub kappa_corrected: f64,
    pub small_sigma_min: bool,
    pub bound_applicable: bool,
    pub safe_bound: Option<f64>,
    pub bound_satisfied: Option<bool>,
    pub corrected_at_most_two: bool,
}

pub fn weyl_diagnostic(x: &Matrix, lambda: f64) -> Result<WeylDiagnostic> {
    check_lambda(lambda)?;
    let sigma = svd(x)?.sigma;
    let (s1, sk) = (sigma[0], *sigma.last().expect("non-empty"));
    let corrected = apply_correction(x, &identity_correction(x.rows(), x.cols(), lambda)?)?;
    let kappa = condition_number(&corrected)?.kappa;
    let bound_applicable = lambda > s1;
    let safe_bound = bound_applicable.then(|| (s1 + lambda) / (lambda - s1));
    Ok(WeylDiagnostic {
        lambda,
        sigma_max: s1,
        sigma_min: sk,
        kappa_corrected: kappa,
        small_sigma_min: sk < SMALL_SIGMA_THRESHOLD,
        bound_applicable,
        safe_bound,
        bound_satisfied: safe_bound.map(|b| within(kappa, b)),
        corrected_at_most_two: within(kappa, 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub kappa: f64,
}

/// Integers `1..=20`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=20).map(f64::from).collect()
}

/// `kappa(X + lambda I_k)` for each lambda, in input order. Rank-deficient
/// sums report `+inf`.
pub fn lambda_sweep(x: &Matrix, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    lambdas
        .par_iter()
        .map(|&lambda| {
            let c = identity_correction(x.rows(), x.cols(), lambda)?;
            let kappa = condition_number(&apply_correction(x, &c)?)?.kappa;
            Ok(SweepRow { lambda, kappa })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,kappa\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.lambda, r.kappa));
    }
    out
}

/// Storage and arithmetic cost of adding a correction to a batch.
///
/// `bytes` counts 4-byte (`f32`) entries, matching how the correction is
/// stored in a single-precision training run. For `B = 1024`, `N = 197`,
/// `d = 768` this is 619,708,416 bytes, about 0.62 GB (0.58 GiB), which is
/// commonly quoted as "about half a gigabyte".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OverheadReport {
    pub batch_size: u64,
    pub seq_len: u64,
    pub embed_dim: u64,
    pub bytes: u64,
    pub flops: u64,
}

pub fn overhead_report(batch_size: u64, seq_len: u64, embed_dim: u64) -> Result<OverheadReport> {
    if batch_size == 0 || seq_len == 0 || embed_dim == 0 {
        return Err(Error::invalid("batch size, sequence length and embedding dimension must be positive"));
    }
    let flops = batch_size
        .checked_mul(seq_len)
        .and_then(|v| v.checked_mul(embed_dim))
        .ok_or_else(|| Error::invalid("overhead overflows 64 bits"))?;
    let bytes = flops
        .checked_mul(4)
        .ok_or_else(|| Error::invalid("overhead overflows 64 bits"))?;
    Ok(OverheadReport {
        batch_size,
        seq_len,
        embed_dim,
        bytes,
        flops,
    })
}
