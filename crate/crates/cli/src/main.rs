//! `scrc`: generate synthetic logits, calibrate, evaluate, and run sweeps.
//!
//! Exit status is 0 on success, 2 when the requested guarantee could not be
//! met by any method or configuration, and 1 on any other error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scrc_core::data::{generate, load_logits, write_logits, LogitRecord, SynthConfig};
use scrc_core::harness::{
    emit, evaluate, evaluate_transductive, evaluate_with_confidences, run_sweep, DataSource, OutputFormat, SweepConfig,
    SweepValue, SweepVariable,
};
use scrc_core::pipeline::{apply_with_confidence, calibrate, uniform_draws, RAND_TEST_STREAM};
use scrc_core::{
    LossKind, Method, Objective, PipelineConfig, RiskSpec, ScoreKind, ScoreTag, ScoredExample, Scorer,
    TransductiveCalibrator,
};

#[derive(Debug, Parser)]
#[command(
    name = "scrc",
    version,
    about = "Selective conformal risk control",
    args_override_self = true
)]
struct Cli {
    /// Read defaults from a `key = value` file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic logits to a CSV file.
    Generate(GenerateArgs),
    /// Calibrate one method and print its thresholds as JSON.
    Calibrate(CalibrateArgs),
    /// Calibrate on one file, evaluate on another, and print the metrics.
    Evaluate(EvaluateArgs),
    /// Repeated-trial sweep over one parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = SynthConfig::default().signal)]
    signal: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    /// Fraction of low-signal examples.
    #[arg(long, default_value_t = SynthConfig::default().hardness_mix)]
    hardness: f64,
}

impl SynthArgs {
    fn config(&self, n_samples: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_samples,
            n_classes: self.k,
            signal: self.signal,
            noise_sd: self.noise_sd,
            hardness_mix: self.hardness,
            seed,
        }
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    synth: SynthArgs,
    /// Number of examples.
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RiskArgs {
    /// Target selection rate.
    #[arg(long, default_value_t = 0.7)]
    xi: f64,
    /// Target selective risk.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Failure probability of the calibration-only coverage bound.
    #[arg(long, default_value_t = RiskSpec::DEFAULT_DELTA)]
    delta: f64,
    /// Step of the lambda1 grid.
    #[arg(long, default_value_t = RiskSpec::DEFAULT_GRID_STEP)]
    eta: f64,
}

impl RiskArgs {
    fn spec(&self) -> Result<RiskSpec> {
        Ok(RiskSpec::new(self.xi, self.alpha, self.delta, self.eta)?)
    }
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value = "margin")]
    score: ScoreTag,
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value = "miscoverage", value_parser = ["miscoverage", "ordinal"])]
    loss: String,
    /// Ordinal weights w(0..K-1); defaults to d / (K - 1).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    ordinal_weights: Option<Vec<f64>>,
    #[arg(long, default_value = "set-size")]
    objective: Objective,
    /// Only try the stage-one threshold instead of sweeping lambda1.
    #[arg(long)]
    no_sweep: bool,
}

impl ModelArgs {
    fn score_kind(&self) -> Result<ScoreKind> {
        Ok(ScoreKind::new(self.score, self.temperature)?)
    }

    fn loss(&self, n_classes: usize) -> Result<LossKind> {
        let loss = match (self.loss.as_str(), &self.ordinal_weights) {
            ("ordinal", Some(w)) => LossKind::ordinal(w.clone())?,
            ("ordinal", None) => LossKind::linear_ordinal(n_classes)?,
            (_, Some(_)) => bail!("--ordinal-weights requires --loss ordinal"),
            _ => LossKind::Miscoverage,
        };
        loss.check_classes(n_classes)?;
        Ok(loss)
    }

    fn pipeline(&self, spec: RiskSpec, n_classes: usize) -> Result<PipelineConfig> {
        Ok(PipelineConfig::new(spec, self.loss(n_classes)?)
            .objective(self.objective)
            .sweep(!self.no_sweep))
    }
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Calibration logits (CSV).
    #[arg(long)]
    cal: PathBuf,
    #[arg(long, default_value = "scrc-i")]
    method: Method,
    /// Test confidence; SCRC-T thresholds are specific to one test point.
    #[arg(long)]
    test_g: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    risk: RiskArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Calibration logits (CSV).
    #[arg(long)]
    cal: PathBuf,
    /// Test logits (CSV).
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "scrc-i")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    risk: RiskArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Also write one selective output per test row (`ABSTAIN` or a 1-based set).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Metrics output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Parameter to vary.
    #[arg(long)]
    vary: SweepVariable,
    /// Comma-separated values (numbers, or score names when varying the score).
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values = ["scrc-t", "scrc-i", "crc-all", "rand"])]
    method: Vec<Method>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 2000)]
    n_cal: usize,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    /// Base seed; trial t uses seed + t.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Logit file to resample from instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
    /// Replace the selection score by independent uniform noise.
    #[arg(long)]
    decouple_g: bool,
    #[command(flatten)]
    risk: RiskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "csv")]
    format: OutputFormat,
    #[arg(long)]
    out: PathBuf,
}

enum Status {
    Done,
    Infeasible,
}

/// Parses `key = value` lines into `--key value` arguments. Blank lines and
/// lines starting with `#` are skipped; `true`/`false` toggle bare flags.
fn config_args(text: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`", i + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => {
                args.push(format!("--{key}"));
                args.push(value.to_string());
            }
        }
    }
    Ok(args)
}

/// Splices config-file arguments in right after the subcommand so that later
/// command-line flags override them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a path")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let extra = config_args(&text)?;
    let sub = rest
        .iter()
        .position(|a| ["generate", "calibrate", "evaluate", "sweep"].contains(&a.as_str()))
        .map_or(rest.len(), |i| i + 1);
    rest.splice(sub..sub, extra);
    Ok(rest)
}

fn load_scored(path: &Path, scorer: &Scorer) -> Result<Vec<ScoredExample>> {
    let records = load_logits(path)?;
    score_records(&records, scorer)
}

fn score_records(records: &[LogitRecord], scorer: &Scorer) -> Result<Vec<ScoredExample>> {
    Ok(records
        .iter()
        .map(|r| scorer.score(&r.logits, Some(r.label)))
        .collect::<scrc_core::Result<_>>()?)
}

fn write_json(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn n_classes(records: &[LogitRecord]) -> Result<usize> {
    match records.first() {
        Some(r) => Ok(r.logits.len()),
        None => bail!("calibration file has no rows"),
    }
}

fn run_generate(args: &GenerateArgs) -> Result<Status> {
    let records = generate(&args.synth.config(args.n, args.seed))?;
    write_logits(&args.out, &records)?;
    log::info!("wrote {} examples to {}", records.len(), args.out.display());
    Ok(Status::Done)
}

fn run_calibrate(args: &CalibrateArgs) -> Result<Status> {
    let records = load_logits(&args.cal)?;
    let k = n_classes(&records)?;
    let scorer = Scorer::fit(args.model.score_kind()?, records.iter().map(|r| r.logits.as_slice()))?;
    let cal = score_records(&records, &scorer)?;
    let config = args.model.pipeline(args.risk.spec()?, k)?;
    let result = match args.method {
        Method::ScrcT => {
            let Some(g) = args.test_g else {
                bail!("SCRC-T needs --test-g");
            };
            TransductiveCalibrator::new(cal, config)?.calibrate_point(g)
        }
        m => calibrate(m, &cal, &config, args.seed),
    };
    match result {
        Ok(outcome) => {
            write_json(args.out.as_deref(), &serde_json::to_value(&outcome)?)?;
            Ok(Status::Done)
        }
        Err(e) if e.is_infeasible() => {
            eprintln!("infeasible: {e}");
            Ok(Status::Infeasible)
        }
        Err(e) => Err(e.into()),
    }
}

fn run_evaluate(args: &EvaluateArgs) -> Result<Status> {
    let records = load_logits(&args.cal)?;
    let k = n_classes(&records)?;
    let scorer = Scorer::fit(args.model.score_kind()?, records.iter().map(|r| r.logits.as_slice()))?;
    let cal = score_records(&records, &scorer)?;
    let test = load_scored(&args.test, &scorer)?;
    if test.iter().any(|e| e.n_classes() != k) {
        bail!("test file has a different number of classes than the calibration file");
    }
    let config = args.model.pipeline(args.risk.spec()?, k)?;

    let (metrics, lambda1, lambda2, outputs) = match args.method {
        Method::ScrcT => {
            let calibrator = TransductiveCalibrator::new(cal, config.clone())?;
            let ev = evaluate_transductive(&calibrator, &test, &config.loss)?;
            let outputs = test
                .iter()
                .map(|e| {
                    calibrator
                        .predict(e)
                        .map(|o| o.to_string())
                        .unwrap_or_else(|_| "ABSTAIN".into())
                })
                .collect::<Vec<_>>();
            (ev.metrics, ev.mean_lambda1, ev.mean_lambda2, outputs)
        }
        m => {
            let outcome = match calibrate(m, &cal, &config, args.seed) {
                Ok(o) => o,
                Err(e) if e.is_infeasible() => {
                    eprintln!("infeasible: {e}");
                    return Ok(Status::Infeasible);
                }
                Err(e) => return Err(e.into()),
            };
            let t = outcome.thresholds;
            let g: Vec<f64> = if m == Method::Rand {
                uniform_draws(args.seed, RAND_TEST_STREAM, test.len())
            } else {
                test.iter().map(ScoredExample::confidence).collect()
            };
            let metrics = if m == Method::Rand {
                evaluate_with_confidences(&t, &test, &g, &config.loss)?
            } else {
                evaluate(&t, &test, &config.loss)?
            };
            let outputs = test
                .iter()
                .zip(&g)
                .map(|(e, &g)| apply_with_confidence(&t, e, g).to_string())
                .collect();
            (metrics, Some(t.lambda1), Some(t.lambda2), outputs)
        }
    };

    if let Some(path) = &args.predictions {
        let mut text = String::from("row,output\n");
        for (i, o) in outputs.iter().enumerate() {
            text.push_str(&format!("{},\"{o}\"\n", i + 1));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let feasible = metrics.feasible;
    let value = serde_json::json!({
        "method": args.method,
        "lambda1": lambda1,
        "lambda2": lambda2,
        "metrics": metrics,
    });
    write_json(args.out.as_deref(), &value)?;
    Ok(if feasible || metrics.n_selected > 0 {
        Status::Done
    } else {
        Status::Infeasible
    })
}

fn run_sweep_cmd(args: &SweepArgs) -> Result<Status> {
    let values = args
        .values
        .iter()
        .map(|v| match args.vary {
            SweepVariable::Score => Ok(SweepValue::Score(v.parse()?)),
            _ => v
                .trim()
                .parse::<f64>()
                .map(SweepValue::Number)
                .with_context(|| format!("sweep value `{v}` is not a number")),
        })
        .collect::<Result<Vec<_>>>()?;
    let (data, k) = match &args.data {
        Some(path) => {
            let k = n_classes(&load_logits(path)?)?;
            (DataSource::File(path.clone()), k)
        }
        None => (DataSource::Synthetic(args.synth.config(0, 0)), args.synth.k),
    };
    let cfg = SweepConfig {
        n_trials: args.trials,
        methods: args.method.clone(),
        data,
        n_cal: args.n_cal,
        n_test: args.n_test,
        base_seed: args.seed,
        score: args.model.score_kind()?,
        loss: args.model.loss(k)?,
        objective: args.model.objective,
        sweep_lambda1: !args.model.no_sweep,
        decouple_g: args.decouple_g,
        ..SweepConfig::new(args.vary, values, args.risk.spec()?)
    };
    let result = run_sweep(&cfg)?;
    let agg_path = emit(&result.rows, args.format, &args.out)?;
    log::info!(
        "wrote {} rows to {} and aggregates to {}",
        result.rows.len(),
        args.out.display(),
        agg_path.display()
    );
    Ok(if result.all_infeasible() {
        eprintln!("every method was infeasible at every sweep value");
        Status::Infeasible
    } else {
        Status::Done
    })
}

fn run(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Sweep(a) => run_sweep_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    // Usage errors exit with 1 so that 2 stays reserved for infeasibility.
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Infeasible) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines_become_flags() {
        let args = config_args("# comment\nxi = 0.8\n\nno_sweep = true\ndecouple-g = false\n").unwrap();
        assert_eq!(args, ["--xi", "0.8", "--no-sweep"]);
        assert!(config_args("oops").is_err());
    }

    #[test]
    fn config_is_spliced_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "alpha = 0.2\n").unwrap();
        let argv: Vec<String> = ["scrc", "--config", path.to_str().unwrap(), "sweep", "--alpha", "0.15"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let out = expand_config(argv).unwrap();
        assert_eq!(out, ["scrc", "sweep", "--alpha", "0.2", "--alpha", "0.15"]);
    }

    #[test]
    fn later_flags_win() {
        let cli = Cli::try_parse_from([
            "scrc", "sweep", "--vary", "xi", "--values", "0.6", "--alpha", "0.2", "--alpha", "0.15", "--out", "x.csv",
        ])
        .unwrap();
        let Command::Sweep(s) = cli.command else { unreachable!() };
        assert_eq!(s.risk.alpha, 0.15);
    }
}
