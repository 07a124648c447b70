//! Monte-Carlo experiment driver: repeated seeded trials over a sweep of one
//! parameter, for any subset of methods, with CSV/JSON output.

mod emit;
mod evaluate;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use emit::{
    aggregate, aggregate_path, emit, read_aggregates, read_trials, write_csv_to, AggregateRow, OutputFormat, TrialRow,
    AGGREGATE_COLUMNS, TRIAL_COLUMNS,
};
pub use evaluate::{evaluate, evaluate_transductive, evaluate_with_confidences, TransductiveEvaluation};

use crate::data::{decouple_confidences, generate, load_logits, split_counts, LogitRecord, SynthConfig};
use crate::error::{Result, ScrcError};
use crate::pipeline::{calibrate, uniform_draws, Objective, PipelineConfig, TransductiveCalibrator, RAND_TEST_STREAM};
use crate::scores::{ScoreKind, ScoreTag, Scorer};
use crate::sets::LossKind;
use crate::types::{Method, RiskSpec, ScoredExample, TrialMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVariable {
    Xi,
    Alpha,
    Delta,
    Score,
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::Xi => "xi",
            SweepVariable::Alpha => "alpha",
            SweepVariable::Delta => "delta",
            SweepVariable::Score => "score",
        })
    }
}

impl FromStr for SweepVariable {
    type Err = ScrcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xi" => Ok(SweepVariable::Xi),
            "alpha" => Ok(SweepVariable::Alpha),
            "delta" => Ok(SweepVariable::Delta),
            "score" => Ok(SweepVariable::Score),
            other => Err(ScrcError::InvalidConfig(format!("unknown sweep variable `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Score(ScoreTag),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Score(tag) => write!(f, "{tag}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Fresh synthetic data per trial; `n_samples` and `seed` are overridden.
    Synthetic(SynthConfig),
    /// One logit file, re-split per trial.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<SweepValue>,
    /// Risk parameters for everything not being swept.
    pub fixed: RiskSpec,
    pub n_trials: usize,
    pub methods: Vec<Method>,
    pub data: DataSource,
    pub n_cal: usize,
    pub n_test: usize,
    pub base_seed: u64,
    /// Score used unless the score itself is swept (the temperature is kept).
    pub score: ScoreKind,
    pub loss: LossKind,
    pub objective: Objective,
    pub sweep_lambda1: bool,
    /// Replace confidences with independent uniforms.
    pub decouple_g: bool,
}

impl SweepConfig {
    pub fn new(variable: SweepVariable, values: Vec<SweepValue>, fixed: RiskSpec) -> Self {
        Self {
            variable,
            values,
            fixed,
            n_trials: 100,
            methods: Method::ALL.to_vec(),
            data: DataSource::Synthetic(SynthConfig::default()),
            n_cal: 2000,
            n_test: 2000,
            base_seed: 0,
            score: ScoreKind::default(),
            loss: LossKind::Miscoverage,
            objective: Objective::default(),
            sweep_lambda1: true,
            decouple_g: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fixed.validate()?;
        if self.values.is_empty() || self.methods.is_empty() || self.n_trials == 0 {
            return Err(ScrcError::InvalidConfig(
                "a sweep needs at least one value, one method, and one trial".into(),
            ));
        }
        for v in &self.values {
            self.spec_for(*v)?;
        }
        Ok(())
    }

    fn spec_for(&self, value: SweepValue) -> Result<RiskSpec> {
        let mut spec = self.fixed;
        match (self.variable, value) {
            (SweepVariable::Xi, SweepValue::Number(v)) => spec.coverage_target = v,
            (SweepVariable::Alpha, SweepValue::Number(v)) => spec.risk_target = v,
            (SweepVariable::Delta, SweepValue::Number(v)) => spec.confidence_delta = v,
            (SweepVariable::Score, SweepValue::Score(_)) => {}
            (var, v) => {
                return Err(ScrcError::InvalidConfig(format!(
                    "sweep over {var} cannot take value `{v}`"
                )));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn score_for(&self, value: SweepValue) -> ScoreKind {
        match value {
            SweepValue::Score(tag) => ScoreKind { tag, ..self.score },
            SweepValue::Number(_) => self.score,
        }
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl SweepResult {
    pub fn from_rows(rows: Vec<TrialRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self { rows, aggregates }
    }

    /// True when no row is feasible.
    pub fn all_infeasible(&self) -> bool {
        self.rows.iter().all(|r| !r.feasible)
    }
}

/// Outcome of one method on one trial's data.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub metrics: Option<TrialMetrics>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
}

/// Calibrates `method` on `cal` and evaluates on `test`. Infeasibility is a
/// normal outcome (reported with `metrics: None` or a not-feasible flag);
/// other errors propagate.
pub fn run_method(
    method: Method,
    cal: &[ScoredExample],
    test: &[ScoredExample],
    config: &PipelineConfig,
    seed: u64,
) -> Result<MethodRun> {
    let outcome = match method {
        Method::ScrcT => {
            let calibrator = TransductiveCalibrator::new(cal.to_vec(), config.clone())?;
            let ev = evaluate_transductive(&calibrator, test, &config.loss)?;
            return Ok(MethodRun {
                metrics: Some(ev.metrics),
                lambda1: ev.mean_lambda1,
                lambda2: ev.mean_lambda2,
            });
        }
        _ => calibrate(method, cal, config, seed),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) if e.is_infeasible() => {
            log::debug!("{method} infeasible: {e}");
            return Ok(MethodRun {
                metrics: None,
                lambda1: None,
                lambda2: None,
            });
        }
        Err(e) => return Err(e),
    };
    let t = outcome.thresholds;
    let metrics = if method == Method::Rand {
        let flips = uniform_draws(seed, RAND_TEST_STREAM, test.len());
        evaluate_with_confidences(&t, test, &flips, &config.loss)?
    } else {
        evaluate(&t, test, &config.loss)?
    };
    Ok(MethodRun {
        metrics: Some(metrics),
        lambda1: Some(t.lambda1),
        lambda2: Some(t.lambda2),
    })
}

fn trial_records(
    cfg: &SweepConfig,
    file: Option<&[LogitRecord]>,
    seed: u64,
) -> Result<(Vec<LogitRecord>, Vec<LogitRecord>)> {
    match (&cfg.data, file) {
        (_, Some(records)) => split_counts(records, cfg.n_cal, cfg.n_test, seed),
        (DataSource::Synthetic(synth), None) => {
            let records = generate(&SynthConfig {
                n_samples: cfg.n_cal + cfg.n_test,
                seed,
                ..synth.clone()
            })?;
            split_counts(&records, cfg.n_cal, cfg.n_test, seed)
        }
        (DataSource::File(_), None) => unreachable!("file data is loaded before the trials run"),
    }
}

fn score_all(scorer: &Scorer, records: &[LogitRecord]) -> Result<Vec<ScoredExample>> {
    records.iter().map(|r| scorer.score(&r.logits, Some(r.label))).collect()
}

fn run_trial(cfg: &SweepConfig, file: Option<&[LogitRecord]>, trial: usize) -> Result<Vec<Vec<TrialRow>>> {
    let seed = cfg.trial_seed(trial);
    let (cal_rec, test_rec) = trial_records(cfg, file, seed)?;

    let mut scored: Vec<(ScoreKind, Vec<ScoredExample>, Vec<ScoredExample>)> = Vec::new();
    let mut per_value = Vec::with_capacity(cfg.values.len());
    for &value in &cfg.values {
        let kind = cfg.score_for(value);
        let idx = match scored.iter().position(|(k, _, _)| *k == kind) {
            Some(i) => i,
            None => {
                let scorer = Scorer::fit(kind, cal_rec.iter().map(|r| r.logits.as_slice()))?;
                let mut cal = score_all(&scorer, &cal_rec)?;
                let mut test = score_all(&scorer, &test_rec)?;
                if cfg.decouple_g {
                    cal = decouple_confidences(&cal, seed)?;
                    test = decouple_confidences(&test, seed.wrapping_add(1 << 32))?;
                }
                scored.push((kind, cal, test));
                scored.len() - 1
            }
        };
        let (_, cal, test) = &scored[idx];
        let config = PipelineConfig::new(cfg.spec_for(value)?, cfg.loss.clone())
            .objective(cfg.objective)
            .sweep(cfg.sweep_lambda1);
        let mut rows = Vec::with_capacity(cfg.methods.len());
        for &method in &cfg.methods {
            let run = run_method(method, cal, test, &config, seed)?;
            let m = run.metrics.as_ref();
            rows.push(TrialRow {
                method,
                sweep_variable: cfg.variable,
                sweep_value: value.to_string(),
                trial,
                n_selected: m.map(|m| m.n_selected),
                selective_coverage: m.map(|m| m.selective_coverage),
                selective_risk: m.and_then(|m| m.selective_risk),
                set_size_selected: m.and_then(|m| m.mean_set_size_selected),
                set_size_rejected: m.and_then(|m| m.mean_set_size_rejected),
                lambda1: run.lambda1,
                lambda2: run.lambda2,
                feasible: m.is_some_and(|m| m.feasible),
            });
        }
        per_value.push(rows);
    }
    Ok(per_value)
}

/// Runs every trial (in parallel) and returns rows ordered by
/// (sweep value, trial, method), independent of scheduling.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let file = match &cfg.data {
        DataSource::File(path) => Some(load_logits(path)?),
        DataSource::Synthetic(synth) => {
            synth.validate()?;
            None
        }
    };
    if let Some(records) = &file {
        let k = records.first().map_or(0, |r| r.logits.len());
        cfg.loss.check_classes(k)?;
    } else if let DataSource::Synthetic(synth) = &cfg.data {
        cfg.loss.check_classes(synth.n_classes)?;
    }
    let per_trial = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, file.as_deref(), t))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(cfg.values.len() * cfg.n_trials * cfg.methods.len());
    for v in 0..cfg.values.len() {
        for trial_rows in &per_trial {
            rows.extend(trial_rows[v].iter().cloned());
        }
    }
    Ok(SweepResult::from_rows(rows))
}
