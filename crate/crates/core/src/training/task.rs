//! Synthetic regression tasks.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

use super::graph::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Targets are the outputs of a frozen, independently initialized
    /// model of the same shape.
    TeacherRegression,
    /// Targets are the input tokens, zero-padded to the embedding width.
    SequenceCopy,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::TeacherRegression => "teacher_regression",
            TaskKind::SequenceCopy => "sequence_copy",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_regression" => Ok(TaskKind::TeacherRegression),
            "sequence_copy" => Ok(TaskKind::SequenceCopy),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub num_samples: usize,
    /// Standard deviation of the Gaussian token entries.
    pub token_scale: f64,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            num_samples: 32,
            token_scale: 1.0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples must be positive"));
        }
        if !(self.token_scale.is_finite() && self.token_scale > 0.0) {
            return Err(Error::invalid("token_scale must be positive"));
        }
        if self.kind == TaskKind::SequenceCopy && model.token_dim > model.embed_dim {
            return Err(Error::invalid("sequence_copy needs token_dim <= embed_dim"));
        }
        Ok(())
    }

    fn draw_tokens(&self, model: &ModelConfig, stream: &str, count: usize) -> Vec<Matrix> {
        let mut rng = Rng::stream(self.seed, stream);
        (0..count)
            .map(|_| rng.normal_matrix(model.seq_len, model.token_dim, self.token_scale))
            .collect()
    }

    fn targets(&self, model: &ModelConfig, tokens: &[Matrix]) -> Result<Vec<Matrix>> {
        match self.kind {
            TaskKind::TeacherRegression => {
                let cfg = ModelConfig {
                    correction: None,
                    ..model.clone()
                };
                let teacher = Model::init(&cfg, self.seed ^ 0x7465_6163_6865_7200)?;
                tokens
                    .iter()
                    .map(|t| teacher.forward(&teacher.embed(t, None)?))
                    .collect()
            }
            TaskKind::SequenceCopy => Ok(tokens
                .iter()
                .map(|t| {
                    Matrix::from_fn(model.seq_len, model.embed_dim, |i, j| {
                        if j < t.cols() {
                            t[(i, j)]
                        } else {
                            0.0
                        }
                    })
                })
                .collect()),
        }
    }

    /// Training samples followed by a separate held-out probe batch of
    /// `probe_size` samples.
    pub fn generate(&self, model: &ModelConfig, probe_size: usize) -> Result<(Batch, Batch)> {
        self.validate(model)?;
        model.validate()?;
        if probe_size == 0 {
            return Err(Error::invalid("probe batch must be non-empty"));
        }
        let train = self.draw_tokens(model, "task/train", self.num_samples);
        let probe = self.draw_tokens(model, "task/probe", probe_size);
        let train_targets = self.targets(model, &train)?;
        let probe_targets = self.targets(model, &probe)?;
        Ok((Batch::new(train, train_targets)?, Batch::new(probe, probe_targets)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            seq_len: 4,
            token_dim: 2,
            embed_dim: 4,
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let task = SyntheticTask::new(TaskKind::TeacherRegression, 5);
        assert_eq!(task.generate(&small(), 3).unwrap(), task.generate(&small(), 3).unwrap());
        let other = SyntheticTask::new(TaskKind::TeacherRegression, 6);
        assert_ne!(task.generate(&small(), 3).unwrap(), other.generate(&small(), 3).unwrap());
    }

    #[test]
    fn copy_targets_pad_tokens() {
        let task = SyntheticTask::new(TaskKind::SequenceCopy, 1);
        let (train, _) = task.generate(&small(), 1).unwrap();
        let (tok, tgt) = (&train.tokens[0], &train.targets[0]);
        assert_eq!(tgt.shape(), (4, 4));
        assert_eq!(tgt.columns(0, 2).unwrap(), *tok);
        assert_eq!(tgt.columns(2, 4).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut task = SyntheticTask::new(TaskKind::SequenceCopy, 1);
        task.num_samples = 0;
        assert!(task.generate(&small(), 1).is_err());
        let task = SyntheticTask::new(TaskKind::SequenceCopy, 1);
        let wide = ModelConfig {
            token_dim: 8,
            ..small()
        };
        assert!(task.generate(&wide, 1).is_err());
    }
}
