//! Training harness: reverse-mode gradients, synthetic tasks, optimizers,
//! per-epoch condition logs and baseline-versus-conditioned comparisons.
//!
//! The correction, when configured, is built once before the first step
//! and never updated. For `ExactSvd` it is built from the embedded tokens
//! of the first probe sample at initialization, so the `kappa <= 2`
//! guarantee holds for that sample at epoch 0 only; afterwards the
//! embedding moves and the correction is stale.

mod gradcheck;
mod graph;
mod optim;
mod tape;
mod task;

pub use gradcheck::{gradient_check, relative_error, GradCheckGroup, GradCheckOptions, GradCheckReport};
pub use graph::{backward, batch_loss, Batch, Gradients};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{Grads, Tape, Var};
pub use task::{SyntheticTask, TaskKind};

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::{condition_probe, mean, Model, ModelConfig, MODEL_KEYS};
use crate::conditioning::CorrectionMatrix;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::svd::condition_number;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Also the size of the held-out probe batch.
    pub batch_size: usize,
    /// Seeds parameter initialization.
    pub seed: u64,
}

const TRAIN_KEYS: &[&str] = &[
    "task",
    "task_seed",
    "num_samples",
    "token_scale",
    "optimizer",
    "learning_rate",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "epochs",
    "batch_size",
    "seed",
];

impl TrainConfig {
    /// The default toy comparison setting: teacher regression on the
    /// default model shape with AdamW, 100 epochs, batches of 8.
    pub fn toy(seed: u64) -> Self {
        Self {
            model: ModelConfig::default(),
            task: SyntheticTask::new(TaskKind::TeacherRegression, seed),
            optimizer: OptimizerConfig::adamw(1e-3),
            epochs: 100,
            batch_size: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(&self.model)?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        self.model.write_kv(&mut out);
        let t = &self.task;
        let o = &self.optimizer;
        let _ = writeln!(out, "task = {}", t.kind);
        let _ = writeln!(out, "task_seed = {}", t.seed);
        let _ = writeln!(out, "num_samples = {}", t.num_samples);
        let _ = writeln!(out, "token_scale = {}", t.token_scale);
        let _ = writeln!(out, "optimizer = {}", o.kind);
        let _ = writeln!(out, "learning_rate = {}", o.learning_rate);
        let _ = writeln!(out, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(out, "beta1 = {}", o.beta1);
        let _ = writeln!(out, "beta2 = {}", o.beta2);
        let _ = writeln!(out, "eps = {}", o.eps);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }

    /// Parses a `key = value` config. Absent keys take the values of
    /// [`TrainConfig::toy`] with the given seed; `task_seed` defaults to
    /// `seed`.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        let seed: u64 = kv.get("seed")?.unwrap_or(0);
        let base = Self::toy(seed);
        let kind: OptimizerKind = kv.get("optimizer")?.unwrap_or(base.optimizer.kind);
        let lr = kv.get("learning_rate")?.unwrap_or(base.optimizer.learning_rate);
        let o = match kind {
            OptimizerKind::Sgd => OptimizerConfig::sgd(lr),
            OptimizerKind::AdamW => OptimizerConfig::adamw(lr),
        };
        let cfg = Self {
            model: ModelConfig::from_kv(&kv)?,
            task: SyntheticTask {
                kind: kv.get("task")?.unwrap_or(base.task.kind),
                seed: kv.get("task_seed")?.unwrap_or(seed),
                num_samples: kv.get("num_samples")?.unwrap_or(base.task.num_samples),
                token_scale: kv.get("token_scale")?.unwrap_or(base.task.token_scale),
            },
            optimizer: OptimizerConfig {
                kind,
                learning_rate: lr,
                weight_decay: kv.get("weight_decay")?.unwrap_or(o.weight_decay),
                beta1: kv.get("beta1")?.unwrap_or(o.beta1),
                beta2: kv.get("beta2")?.unwrap_or(o.beta2),
                eps: kv.get("eps")?.unwrap_or(o.eps),
            },
            epochs: kv.get("epochs")?.unwrap_or(base.epochs),
            batch_size: kv.get("batch_size")?.unwrap_or(base.batch_size),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Condition numbers are means over the probe batch of non-skipped
/// entries; `None` when every entry was rank-deficient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub kappa_tokens: Option<f64>,
    pub kappa_attn_layer1_mean: Option<f64>,
    pub kappa_attn_alllayers_mean: Option<f64>,
    /// `[layer][head]` attention-output condition number, averaged over the
    /// probe batch.
    pub heads: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, step: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub model: Model,
    pub correction: Option<CorrectionMatrix>,
    /// Condition number of the first probe sample's embedded tokens (with
    /// the correction) at initialization.
    pub initial_kappa_tokens: Option<f64>,
    pub status: RunStatus,
}

struct ProbeSummary {
    tokens: Option<f64>,
    layer1: Option<f64>,
    all: Option<f64>,
    heads: Vec<Vec<Option<f64>>>,
}

fn probe_epoch(model: &Model, probe: &Batch, correction: Option<&CorrectionMatrix>) -> Result<ProbeSummary> {
    let records = probe
        .tokens
        .iter()
        .map(|t| condition_probe(model, &model.embed(t, correction)?))
        .collect::<Result<Vec<_>>>()?;
    let tokens = mean(records.iter().filter_map(|r| r.kappa_tokens));
    let head_kappas = |l: usize| {
        records
            .iter()
            .flat_map(move |r| r.layers[l].heads.iter().filter_map(|h| h.kappa_output))
    };
    let layer1 = mean(head_kappas(0));
    let all = mean((0..model.layers.len()).flat_map(head_kappas));
    let heads = (0..model.layers.len())
        .map(|l| {
            (0..model.config.heads)
                .map(|h| mean(records.iter().filter_map(|r| r.layers[l].heads[h].kappa_output)))
                .collect()
        })
        .collect();
    Ok(ProbeSummary {
        tokens,
        layer1,
        all,
        heads,
    })
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (data, probe) = config.task.generate(&config.model, config.batch_size)?;
    let mut model = Model::init(&config.model, config.seed)?;
    let reference = model.embed(&probe.tokens[0], None)?;
    let correction = match &config.model.correction {
        Some(spec) => Some(spec.build(&reference)?),
        None => None,
    };
    let initial_kappa_tokens = condition_number(&model.embed(&probe.tokens[0], correction.as_ref())?)?.finite_kappa();

    let mut optimizer = Optimizer::new(config.optimizer);
    let mut logs = Vec::with_capacity(config.epochs);
    let mut status = RunStatus::Completed;
    'epochs: for epoch in 0..config.epochs {
        let probed = probe_epoch(&model, &probe, correction.as_ref())?;
        let mut losses = Vec::new();
        for (step, start) in (0..data.len()).step_by(config.batch_size).enumerate() {
            let end = (start + config.batch_size).min(data.len());
            let batch = Batch::new(data.tokens[start..end].to_vec(), data.targets[start..end].to_vec())?;
            let grads = match backward(&model, &batch, correction.as_ref()) {
                Ok(g) => g,
                Err(e) if e.is_numerical() => {
                    status = RunStatus::Diverged { epoch, step };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            losses.push(grads.loss);
            let g: Vec<_> = grads.params.into_iter().map(|(_, g)| g).collect();
            match optimizer.step(model.parameters_mut(), &g) {
                Ok(()) => {}
                Err(e) if e.is_numerical() => {
                    status = RunStatus::Diverged { epoch, step };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        logs.push(EpochLog {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            kappa_tokens: probed.tokens,
            kappa_attn_layer1_mean: probed.layer1,
            kappa_attn_alllayers_mean: probed.all,
            heads: probed.heads,
        });
    }
    Ok(TrainOutcome {
        logs,
        model,
        correction,
        initial_kappa_tokens,
        status,
    })
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,loss,kappa_tokens,kappa_attn_l1,kappa_attn_all`; skipped
/// entries are empty fields.
pub fn epoch_logs_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,kappa_tokens,kappa_attn_l1,kappa_attn_all\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            l.epoch,
            l.train_loss,
            csv_field(l.kappa_tokens),
            csv_field(l.kappa_attn_layer1_mean),
            csv_field(l.kappa_attn_alllayers_mean)
        );
    }
    out
}

/// Averages over epochs of one run's logged quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub kappa_tokens: Option<f64>,
    pub kappa_attn_l1: Option<f64>,
    pub kappa_attn_all: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub epochs_completed: usize,
    pub diverged: bool,
}

impl RunSummary {
    pub fn of(outcome: &TrainOutcome) -> Self {
        let logs = &outcome.logs;
        Self {
            kappa_tokens: mean(logs.iter().filter_map(|l| l.kappa_tokens)),
            kappa_attn_l1: mean(logs.iter().filter_map(|l| l.kappa_attn_layer1_mean)),
            kappa_attn_all: mean(logs.iter().filter_map(|l| l.kappa_attn_alllayers_mean)),
            initial_loss: logs.first().map(|l| l.train_loss),
            final_loss: logs.last().map(|l| l.train_loss),
            epochs_completed: logs.len(),
            diverged: outcome.status != RunStatus::Completed,
        }
    }
}

/// Flat comparison record; ratios are conditioned over baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonSummary {
    pub epochs: usize,
    pub base_kappa_tokens: Option<f64>,
    pub cond_kappa_tokens: Option<f64>,
    pub ratio_kappa_tokens: Option<f64>,
    pub base_kappa_attn_l1: Option<f64>,
    pub cond_kappa_attn_l1: Option<f64>,
    pub ratio_kappa_attn_l1: Option<f64>,
    pub base_kappa_attn_all: Option<f64>,
    pub cond_kappa_attn_all: Option<f64>,
    pub ratio_kappa_attn_all: Option<f64>,
    pub base_final_loss: Option<f64>,
    pub cond_final_loss: Option<f64>,
    pub base_diverged: bool,
    pub cond_diverged: bool,
}

impl ComparisonSummary {
    pub fn new(base: &RunSummary, cond: &RunSummary, epochs: usize) -> Self {
        let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(c), Some(b)) if b != 0.0 => Some(c / b),
            _ => None,
        };
        Self {
            epochs,
            base_kappa_tokens: base.kappa_tokens,
            cond_kappa_tokens: cond.kappa_tokens,
            ratio_kappa_tokens: ratio(cond.kappa_tokens, base.kappa_tokens),
            base_kappa_attn_l1: base.kappa_attn_l1,
            cond_kappa_attn_l1: cond.kappa_attn_l1,
            ratio_kappa_attn_l1: ratio(cond.kappa_attn_l1, base.kappa_attn_l1),
            base_kappa_attn_all: base.kappa_attn_all,
            cond_kappa_attn_all: cond.kappa_attn_all,
            ratio_kappa_attn_all: ratio(cond.kappa_attn_all, base.kappa_attn_all),
            base_final_loss: base.final_loss,
            cond_final_loss: cond.final_loss,
            base_diverged: base.diverged,
            cond_diverged: cond.diverged,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub summary: ComparisonSummary,
    pub base: TrainOutcome,
    pub cond: TrainOutcome,
}

/// Trains both configs (concurrently) and summarizes them. The configs
/// must agree in everything except the correction.
pub fn compare_runs(base: &TrainConfig, cond: &TrainConfig) -> Result<Comparison> {
    let mut stripped = cond.clone();
    stripped.model.correction = base.model.correction;
    if stripped != *base {
        return Err(Error::invalid(
            "compared configs may differ only in the correction",
        ));
    }
    let (b, c) = rayon::join(|| train(base), || train(cond));
    let (base, cond) = (b?, c?);
    let summary = ComparisonSummary::new(&RunSummary::of(&base), &RunSummary::of(&cond), base.logs.len());
    Ok(Comparison { summary, base, cond })
}
