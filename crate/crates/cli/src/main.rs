use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use condtok::attention::{AttentionHead, AttentionKind, Model, ModelConfig};
use condtok::conditioning::{
    apply_correction, default_lambda_grid, lambda_sweep, mu_report, overhead_report, sweep_csv,
    verify_attention_bounds, verify_monotonicity, weyl_diagnostic, CorrectionSpec, DEFAULT_LAMBDA,
};
use condtok::matrix_io::{format_matrix_csv, parse_matrix_csv};
use condtok::svd::{condition_number, svd};
use condtok::training::{
    compare_runs, epoch_logs_csv, gradient_check, train, GradCheckOptions, RunStatus, SyntheticTask, TaskKind,
    TrainConfig,
};
use condtok::{Error, Matrix};

mod report;

use report::{flatten, render};

#[derive(Parser)]
#[command(name = "condtok", version, about = "Condition numbers, token corrections and toy transformer runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Exact,
    Identity,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    /// `X + C`.
    Corrected,
    /// `C` alone.
    Correction,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Check {
    All,
    Bounds,
    Monotonicity,
    Weyl,
}

#[derive(Args)]
struct Output {
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeadFiles {
    #[arg(long)]
    wq: PathBuf,
    #[arg(long)]
    wk: PathBuf,
    #[arg(long)]
    wv: PathBuf,
}

#[derive(Args)]
struct Correction {
    /// Correction kind.
    #[arg(long, value_enum, default_value = "identity")]
    kind: Kind,
    /// Scale of the identity correction.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

impl Correction {
    fn spec(&self) -> condtok::Result<CorrectionSpec> {
        match self.kind {
            Kind::Exact => Ok(CorrectionSpec::exact_svd()),
            Kind::Identity => CorrectionSpec::identity_scaled(self.lambda),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Seed for initialization and data (overrides the config file).
    #[arg(long)]
    seed: u64,
    /// `key = value` training config; defaults to the toy setting.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Singular values of a matrix.
    Spectrum {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
    /// Condition number of a matrix.
    Kappa {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
    /// Add a correction to a matrix and write the result as CSV.
    Correct {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        correction: Correction,
        #[arg(long, value_enum, default_value = "corrected")]
        emit: Emit,
        #[command(flatten)]
        output: Output,
    },
    /// Conditioning measures of linear and softmax attention.
    Mu {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        head: HeadFiles,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
    /// Check the attention bounds, monotonicity under a correction and
    /// the identity-correction diagnostic.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        head: HeadFiles,
        #[command(flatten)]
        correction: Correction,
        #[arg(long, value_enum, default_value = "all")]
        check: Check,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
    /// Condition number of `X + lambda I` over a grid of lambdas.
    SweepLambda {
        #[arg(long = "in")]
        input: PathBuf,
        /// Integer range `lo:hi`, inclusive.
        #[arg(long, conflicts_with = "lambdas")]
        grid: Option<String>,
        /// Comma-separated list of lambdas.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
    /// Memory and arithmetic cost of a correction for a batch.
    Overhead {
        #[arg(long)]
        batch: u64,
        #[arg(long)]
        seq: u64,
        #[arg(long)]
        dim: u64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// Model config; defaults to N=3, t=2, d=4, h=2, one layer.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        attention: Option<AttentionArg>,
        #[arg(long)]
        layer_norm: bool,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
    /// Train one model and write its per-epoch log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Replace the config's correction.
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Also write the final parameters as JSON.
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Train a baseline and a conditioned model and summarize both.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "identity")]
        kind: Kind,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        /// Write `base.csv`, `cond.csv` and `summary.json` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttentionArg {
    Linear,
    Softmax,
}

impl From<AttentionArg> for AttentionKind {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Linear => AttentionKind::Linear,
            AttentionArg::Softmax => AttentionKind::Softmax,
        }
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_matrix(path: &Path) -> CliResult<Matrix> {
    parse_matrix_csv(&read_text(path)?).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn read_head(files: &HeadFiles) -> CliResult<AttentionHead> {
    Ok(AttentionHead::new(
        read_matrix(&files.wq)?,
        read_matrix(&files.wk)?,
        read_matrix(&files.wv)?,
    )?)
}

fn write_output(output: &Output, text: &str) -> CliResult<()> {
    match &output.out {
        Some(path) => std::fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit(output: &Output, format: Format, value: &Value) -> CliResult<()> {
    write_output(output, &render(value, format == Format::Csv))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = || usage(format!("--grid expects `lo:hi` with integers 1 <= lo <= hi, got `{text}`"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo..=hi).map(f64::from).collect())
}

fn load_train_config(run: &RunArgs) -> CliResult<TrainConfig> {
    let mut config = match &run.config {
        Some(path) => TrainConfig::from_kv_str(&read_text(path)?).map_err(|e| {
            let mut f = Failure::from(e);
            f.message = format!("{}: {}", path.display(), f.message);
            f
        })?,
        None => TrainConfig::toy(run.seed),
    };
    config.seed = run.seed;
    config.task.seed = run.seed;
    if let Some(e) = run.epochs {
        config.epochs = e;
    }
    config.validate()?;
    Ok(config)
}

fn model_json(model: &Model) -> Value {
    let mut map = Map::new();
    for (name, m) in model.parameters() {
        let rows: Vec<Value> = (0..m.rows()).map(|i| json!(m.row(i))).collect();
        map.insert(name, Value::Array(rows));
    }
    Value::Object(map)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Spectrum { input, format, output } => {
            let sigma = svd(&read_matrix(&input)?)?.sigma;
            let text = match format {
                Format::Csv => {
                    let mut s = String::from("index,sigma\n");
                    for (i, v) in sigma.iter().enumerate() {
                        s.push_str(&format!("{},{v}\n", i + 1));
                    }
                    s
                }
                Format::Json => format!("{}\n", json!({ "singular_values": sigma })),
            };
            write_output(&output, &text)
        }
        Command::Kappa { input, format, output } => {
            let report = condition_number(&read_matrix(&input)?)?;
            emit(&output, format, &to_value(&report))
        }
        Command::Correct {
            input,
            correction,
            emit: what,
            output,
        } => {
            let x = read_matrix(&input)?;
            let c = correction.spec()?.build(&x)?;
            let m = match what {
                Emit::Corrected => apply_correction(&x, &c)?,
                Emit::Correction => c.matrix().clone(),
            };
            write_output(&output, &format_matrix_csv(&m))
        }
        Command::Mu {
            input,
            head,
            format,
            output,
        } => {
            let report = mu_report(&read_matrix(&input)?, &read_head(&head)?)?;
            emit(&output, format, &to_value(&report))
        }
        Command::Verify {
            input,
            head,
            correction,
            check,
            format,
            output,
        } => {
            let x = read_matrix(&input)?;
            let head = read_head(&head)?;
            let spec = correction.spec()?;
            let mut value = Map::new();
            if matches!(check, Check::All | Check::Bounds) {
                value.insert("bounds".into(), to_value(&verify_attention_bounds(&x, &head)?));
            }
            if matches!(check, Check::All | Check::Monotonicity) {
                value.insert("monotonicity".into(), to_value(&verify_monotonicity(&x, &head, spec)?));
            }
            if matches!(check, Check::All | Check::Weyl) {
                value.insert("weyl".into(), to_value(&weyl_diagnostic(&x, correction.lambda)?));
            }
            emit(&output, format, &flatten(&Value::Object(value)))
        }
        Command::SweepLambda {
            input,
            grid,
            lambdas,
            format,
            output,
        } => {
            let grid = match (grid, lambdas) {
                (Some(g), _) => parse_grid(&g)?,
                (None, Some(l)) => l,
                (None, None) => default_lambda_grid(),
            };
            let rows = lambda_sweep(&read_matrix(&input)?, &grid)?;
            let text = match format {
                Format::Csv => sweep_csv(&rows),
                Format::Json => format!("{}\n", to_value(&rows)),
            };
            write_output(&output, &text)
        }
        Command::Overhead {
            batch,
            seq,
            dim,
            format,
            output,
        } => {
            let r = overhead_report(batch, seq, dim)?;
            let mut v = to_value(&r);
            v["gigabytes"] = json!(r.bytes as f64 / 1e9);
            v["gibibytes"] = json!(r.bytes as f64 / (1u64 << 30) as f64);
            emit(&output, format, &v)
        }
        Command::Gradcheck {
            seed,
            config,
            attention,
            layer_norm,
            step,
            format,
            output,
        } => {
            let mut cfg = match &config {
                Some(path) => ModelConfig::from_kv_str(&read_text(path)?)?,
                None => ModelConfig {
                    seq_len: 3,
                    token_dim: 2,
                    embed_dim: 4,
                    heads: 2,
                    layers: 1,
                    ..ModelConfig::default()
                },
            };
            if let Some(a) = attention {
                cfg.attention = a.into();
            }
            cfg.layer_norm |= layer_norm;
            if !(step.is_finite() && step > 0.0) {
                return Err(usage("--step must be positive"));
            }
            let model = Model::init(&cfg, seed)?;
            let task = SyntheticTask {
                num_samples: 2,
                ..SyntheticTask::new(TaskKind::TeacherRegression, seed)
            };
            let (batch, _) = task.generate(&cfg, 1)?;
            let correction = match cfg.correction {
                Some(spec) => Some(spec.build(&model.embed(&batch.tokens[0], None)?)?),
                None => None,
            };
            let opts = GradCheckOptions {
                step,
                seed,
                ..GradCheckOptions::default()
            };
            let report = gradient_check(&model, &batch, correction.as_ref(), opts)?;
            let mut flat = Map::new();
            flat.insert("max_rel_error".into(), json!(report.max_rel_error));
            flat.insert("correction_gradient".into(), json!(report.correction_gradient));
            for g in &report.groups {
                flat.insert(format!("{}_max_rel_error", g.name), json!(g.max_rel_error));
            }
            emit(&output, format, &Value::Object(flat))
        }
        Command::Train {
            run,
            kind,
            lambda,
            format,
            model_out,
            output,
        } => {
            let mut config = load_train_config(&run)?;
            if let Some(k) = kind {
                let c = Correction {
                    kind: k,
                    lambda: lambda.unwrap_or(DEFAULT_LAMBDA),
                };
                config.model.correction = Some(c.spec()?);
            } else if lambda.is_some() {
                return Err(usage("--lambda needs --kind"));
            }
            let outcome = train(&config)?;
            let text = match format {
                Format::Csv => epoch_logs_csv(&outcome.logs),
                Format::Json => format!("{}\n", to_value(&outcome.logs)),
            };
            write_output(&output, &text)?;
            if let Some(path) = model_out {
                std::fs::write(&path, format!("{}\n", model_json(&outcome.model)))
                    .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
            }
            match outcome.status {
                RunStatus::Completed => Ok(()),
                RunStatus::Diverged { epoch, step } => Err(Error::NonFiniteLoss { epoch, step }.into()),
            }
        }
        Command::Compare {
            run,
            kind,
            lambda,
            out_dir,
            format,
            output,
        } => {
            let mut base = load_train_config(&run)?;
            base.model.correction = None;
            let mut cond = base.clone();
            cond.model.correction = Some(Correction { kind, lambda }.spec()?);
            let cmp = compare_runs(&base, &cond)?;
            let summary = to_value(&cmp.summary);
            if let Some(dir) = out_dir {
                let write = |name: &str, text: &str| {
                    let path = dir.join(name);
                    std::fs::write(&path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
                };
                std::fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
                write("base.csv", &epoch_logs_csv(&cmp.base.logs))?;
                write("cond.csv", &epoch_logs_csv(&cmp.cond.logs))?;
                write("summary.json", &render(&summary, false))?;
            }
            emit(&output, format, &summary)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
