//! Conditioned embedded tokens.
//!
//! Dense linear algebra with a deterministic Jacobi SVD, correction
//! matrices that shrink the condition number of embedded token matrices,
//! the `mu` conditioning measures for linear and softmax self-attention, a
//! small transformer with condition probes, and a training harness that
//! tracks conditioning epoch by epoch.

pub mod attention;
pub mod conditioning;
pub mod error;
pub mod kv;
pub mod matrix;
pub mod matrix_io;
pub mod rng;
pub mod svd;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use svd::{condition_number, singular_values, svd, ConditionReport, SvdResult};
