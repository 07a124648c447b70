//! End-to-end calibration: SCRC-T, SCRC-I, and the CRC-ALL / RAND baselines.
//!
//! Both SCRC variants sweep `lambda1` over `{start, start + eta, ..., 1}` and
//! keep the feasible grid point that optimizes the chosen objective. The sweep
//! starts at the transductive threshold (SCRC-T, recomputed per test point) or
//! at the calibration-only threshold (SCRC-I, computed once).
//!
//! Calibration points are held sorted by confidence, descending, so the subset
//! selected by any `lambda1` is a prefix and is identified by its length `m`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrcError};
use crate::sets::{prediction_set, LossKind};
use crate::stage1::{select, SortedConfidences, StageOneResult};
use crate::stage2::{
    augmented_budget_product, augmented_on_selected, crc_budget, crc_lambda2, mean_set_size, min_selected,
};
use crate::types::{Method, RiskSpec, ScoredExample, SelectiveOutput, ThresholdPair};

/// Criterion for choosing among feasible `lambda1` grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Objective {
    /// Smallest `lambda2`.
    #[serde(rename = "lambda2")]
    MinLambda2,
    /// Smallest empirical mean set size over the selected calibration points.
    #[default]
    #[serde(rename = "set-size")]
    MinSetSize,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::MinLambda2 => "lambda2",
            Objective::MinSetSize => "set-size",
        })
    }
}

impl FromStr for Objective {
    type Err = ScrcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda2" => Ok(Objective::MinLambda2),
            "set-size" => Ok(Objective::MinSetSize),
            other => Err(ScrcError::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub spec: RiskSpec,
    pub loss: LossKind,
    pub objective: Objective,
    /// Sweep `lambda1` upward from the stage-one threshold. When false only the
    /// stage-one threshold itself is tried.
    pub sweep: bool,
}

impl PipelineConfig {
    pub fn new(spec: RiskSpec, loss: LossKind) -> Self {
        Self {
            spec,
            loss,
            objective: Objective::default(),
            sweep: true,
        }
    }

    pub fn objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn sweep(mut self, sweep: bool) -> Self {
        self.sweep = sweep;
        self
    }
}

/// One row of the `lambda1` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda1: f64,
    pub m: usize,
    pub lambda2: Option<f64>,
    pub mean_set_size: Option<f64>,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub xi_lcb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub thresholds: ThresholdPair,
    pub grid_trace: Vec<GridPoint>,
    pub objective: Objective,
}

/// `{start, start + eta, ...}` up to 1, always ending at exactly 1.
pub fn lambda1_grid(start: f64, eta: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut k = 0u32;
    loop {
        let v = start + f64::from(k) * eta;
        if v > 1.0 + 1e-12 {
            break;
        }
        grid.push(v.min(1.0));
        k += 1;
    }
    match grid.last_mut() {
        Some(last) if 1.0 - *last <= 1e-12 => *last = 1.0,
        _ => grid.push(1.0),
    }
    grid
}

/// Labelled calibration points, sorted by confidence (descending).
#[derive(Debug, Clone)]
pub struct CalibrationData {
    by_confidence: Vec<ScoredExample>,
    confidences: SortedConfidences,
}

impl CalibrationData {
    pub fn new(mut cal: Vec<ScoredExample>, loss: &LossKind) -> Result<Self> {
        let Some(first) = cal.first() else {
            return Err(ScrcError::InvalidConfig("empty calibration set".into()));
        };
        let k = first.n_classes();
        for e in &cal {
            e.require_label()?;
            if e.n_classes() != k {
                return Err(ScrcError::InvalidConfig(format!(
                    "calibration examples mix {k} and {} classes",
                    e.n_classes()
                )));
            }
        }
        loss.check_classes(k)?;
        cal.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
        let confidences = SortedConfidences::new(cal.iter().map(ScoredExample::confidence))?;
        Ok(Self {
            by_confidence: cal,
            confidences,
        })
    }

    pub fn len(&self) -> usize {
        self.by_confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_confidence.is_empty()
    }

    pub fn confidences(&self) -> &SortedConfidences {
        &self.confidences
    }

    /// Calibration points with `g >= 1 - lambda1`.
    pub fn selected(&self, lambda1: f64) -> &[ScoredExample] {
        &self.by_confidence[..self.confidences.count_selected(lambda1)]
    }

    fn prefix(&self, m: usize) -> Vec<&ScoredExample> {
        self.by_confidence[..m].iter().collect()
    }
}

/// Stage-two solution for one selected prefix.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PrefixSolution {
    lambda2: f64,
    mean_set_size: f64,
}

fn better(objective: Objective, candidate: &GridPoint, best: &GridPoint) -> bool {
    match objective {
        Objective::MinLambda2 => candidate.lambda2 < best.lambda2,
        Objective::MinSetSize => candidate.mean_set_size < best.mean_set_size,
    }
}

/// Runs `eval` over the grid, returning the trace and the winning point.
/// Strict comparison keeps the earliest (smallest `lambda1`) point on ties.
fn run_grid(
    grid: &[f64],
    objective: Objective,
    mut eval: impl FnMut(f64) -> GridPoint,
) -> (Vec<GridPoint>, Option<GridPoint>) {
    let mut trace = Vec::with_capacity(grid.len());
    let mut best: Option<GridPoint> = None;
    for &lambda1 in grid {
        let point = eval(lambda1);
        if point.feasible && best.as_ref().is_none_or(|b| better(objective, &point, b)) {
            best = Some(point);
        }
        trace.push(point);
    }
    (trace, best)
}

/// SCRC-T calibrator for a batch of test points.
///
/// The stage-two solution at a grid value depends on the test point only
/// through which calibration prefix is selected, so solutions are cached by
/// prefix length and shared across test points (and threads).
#[derive(Debug)]
pub struct TransductiveCalibrator {
    data: CalibrationData,
    config: PipelineConfig,
    cache: Vec<OnceLock<Option<PrefixSolution>>>,
}

impl TransductiveCalibrator {
    pub fn new(cal: Vec<ScoredExample>, config: PipelineConfig) -> Result<Self> {
        config.spec.validate()?;
        let data = CalibrationData::new(cal, &config.loss)?;
        let cache = (0..=data.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { data, config, cache })
    }

    pub fn data(&self) -> &CalibrationData {
        &self.data
    }

    /// `None` when the counting budget for `m` points is not positive.
    fn solve_prefix(&self, m: usize) -> Option<PrefixSolution> {
        let points = self.data.prefix(m);
        match crc_lambda2(points.iter().copied(), self.config.spec.risk_target, &self.config.loss) {
            Ok(r) => {
                let lambda2 = r.lambda2_hat.expect("feasible result carries lambda2");
                Some(PrefixSolution {
                    lambda2,
                    mean_set_size: mean_set_size(&points, lambda2).unwrap_or(0.0),
                })
            }
            Err(e) if e.is_infeasible() => None,
            Err(e) => unreachable!("calibration data was validated up front: {e}"),
        }
    }

    fn prefix_solution(&self, m: usize) -> Option<PrefixSolution> {
        *self.cache[m].get_or_init(|| self.solve_prefix(m))
    }

    fn grid_point(&self, lambda1: f64, cached: bool) -> GridPoint {
        let m = self.data.confidences.count_selected(lambda1);
        let sol = if cached {
            self.prefix_solution(m)
        } else {
            self.solve_prefix(m)
        };
        GridPoint {
            lambda1,
            m,
            lambda2: sol.map(|s| s.lambda2),
            mean_set_size: sol.map(|s| s.mean_set_size),
            feasible: sol.is_some(),
            xi_lcb: None,
        }
    }

    fn grid_for(&self, test_g: f64) -> Vec<f64> {
        let start =
            StageOneResult::transductive(&self.data.confidences, test_g, self.config.spec.coverage_target).lambda1_hat;
        if self.config.sweep {
            lambda1_grid(start, self.config.spec.grid_step)
        } else {
            vec![start]
        }
    }

    fn calibrate(&self, test_g: f64, cached: bool) -> Result<CalibrationOutcome> {
        if !(0.0..=1.0).contains(&test_g) {
            return Err(ScrcError::OutOfRange {
                what: "confidence",
                value: test_g,
                bounds: "[0, 1]",
            });
        }
        let grid = self.grid_for(test_g);
        let (grid_trace, best) = run_grid(&grid, self.config.objective, |l| self.grid_point(l, cached));
        let best = best.ok_or(ScrcError::NoFeasibleGridPoint)?;
        Ok(CalibrationOutcome {
            thresholds: ThresholdPair::new(best.lambda1, best.lambda2.unwrap(), Method::ScrcT, None)?,
            grid_trace,
            objective: self.config.objective,
        })
    }

    /// Algorithm output for one test point.
    pub fn calibrate_point(&self, test_g: f64) -> Result<CalibrationOutcome> {
        self.calibrate(test_g, true)
    }

    /// Same as [`Self::calibrate_point`] but re-solves every grid point.
    pub fn calibrate_point_uncached(&self, test_g: f64) -> Result<CalibrationOutcome> {
        self.calibrate(test_g, false)
    }

    /// Thresholds for one test point, without keeping the grid trace.
    pub fn thresholds_for(&self, test_g: f64) -> Result<ThresholdPair> {
        let grid = self.grid_for(test_g);
        let mut best: Option<GridPoint> = None;
        for &l in &grid {
            let p = self.grid_point(l, true);
            if p.feasible && best.as_ref().is_none_or(|b| better(self.config.objective, &p, b)) {
                best = Some(p);
            }
        }
        let best = best.ok_or(ScrcError::NoFeasibleGridPoint)?;
        ThresholdPair::new(best.lambda1, best.lambda2.unwrap(), Method::ScrcT, None)
    }

    /// Calibrates for `example` and applies the result to it.
    pub fn predict(&self, example: &ScoredExample) -> Result<SelectiveOutput> {
        Ok(apply(&self.thresholds_for(example.confidence())?, example))
    }
}

/// SCRC-T for a single test confidence.
pub fn scrc_t_calibrate(cal: &[ScoredExample], test_g: f64, config: &PipelineConfig) -> Result<CalibrationOutcome> {
    TransductiveCalibrator::new(cal.to_vec(), config.clone())?.calibrate_point(test_g)
}

/// SCRC-I: calibration-only first stage, augmented-loss second stage.
pub fn scrc_i_calibrate(cal: &[ScoredExample], config: &PipelineConfig) -> Result<CalibrationOutcome> {
    config.spec.validate()?;
    let data = CalibrationData::new(cal.to_vec(), &config.loss)?;
    scrc_i_on(&data, config)
}

pub(crate) fn scrc_i_on(data: &CalibrationData, config: &PipelineConfig) -> Result<CalibrationOutcome> {
    let spec = &config.spec;
    let n = data.len();
    let start = StageOneResult::calibration_only(&data.confidences, spec.coverage_target, spec.confidence_delta);
    let grid = if config.sweep {
        lambda1_grid(start.lambda1_hat, spec.grid_step)
    } else {
        vec![start.lambda1_hat]
    };

    let mut first_error = None;
    let (grid_trace, best) = run_grid(&grid, config.objective, |lambda1| {
        let stage1 = StageOneResult::calibration_only_at(&data.confidences, lambda1, spec.confidence_delta);
        let xi_lcb = stage1.xi_lcb.expect("calibration-only mode sets xi_lcb");
        let points = data.prefix(data.confidences.count_selected(lambda1));
        let m = points.len();
        let solved = augmented_on_selected(&points, n, spec.risk_target, xi_lcb, &config.loss);
        match solved {
            Ok(r) => {
                let lambda2 = r.lambda2_hat.unwrap();
                GridPoint {
                    lambda1,
                    m,
                    lambda2: Some(lambda2),
                    mean_set_size: Some(mean_set_size(&points, lambda2).unwrap_or(0.0)),
                    feasible: true,
                    xi_lcb: Some(xi_lcb),
                }
            }
            Err(e) => {
                debug_assert!(e.is_infeasible(), "{e}");
                first_error.get_or_insert(e);
                GridPoint {
                    lambda1,
                    m,
                    lambda2: None,
                    mean_set_size: None,
                    feasible: false,
                    xi_lcb: Some(xi_lcb),
                }
            }
        }
    });
    let Some(best) = best else {
        // Report the most favourable product over the grid.
        let product = grid_trace
            .iter()
            .filter_map(|p| p.xi_lcb)
            .map(|x| augmented_budget_product(n, spec.risk_target, x))
            .fold(0.0, f64::max);
        log::debug!("SCRC-I infeasible at every grid point: {first_error:?}");
        return Err(ScrcError::InfeasibleLowerBound { product });
    };
    Ok(CalibrationOutcome {
        thresholds: ThresholdPair::new(best.lambda1, best.lambda2.unwrap(), Method::ScrcI, best.xi_lcb)?,
        grid_trace,
        objective: config.objective,
    })
}

/// CRC-ALL: accept everything, then plain CRC on all `n` points.
pub fn crc_all_calibrate(cal: &[ScoredExample], config: &PipelineConfig) -> Result<CalibrationOutcome> {
    config.spec.validate()?;
    let data = CalibrationData::new(cal.to_vec(), &config.loss)?;
    let points = data.prefix(data.len());
    let r = crc_lambda2(points.iter().copied(), config.spec.risk_target, &config.loss)?;
    let lambda2 = r.lambda2_hat.unwrap();
    Ok(CalibrationOutcome {
        thresholds: ThresholdPair::new(1.0, lambda2, Method::CrcAll, None)?,
        grid_trace: vec![GridPoint {
            lambda1: 1.0,
            m: r.m,
            lambda2: Some(lambda2),
            mean_set_size: mean_set_size(&points, lambda2),
            feasible: true,
            xi_lcb: None,
        }],
        objective: config.objective,
    })
}

/// Stream used for RAND's test-time coin flips.
pub const RAND_TEST_STREAM: u64 = 3;
const RAND_CALIBRATION_STREAM: u64 = 16;
/// Redraws allowed when the random calibration subset is too small.
pub const RAND_MAX_ATTEMPTS: usize = 16;

/// `n` uniform draws in `[0, 1)` from a seeded ChaCha stream.
pub fn uniform_draws(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// RAND: each calibration point is kept independently with probability `xi`,
/// then plain CRC runs on the kept subset.
///
/// A point with draw `u` is kept iff `u >= 1 - xi`, which is the first-stage
/// rule with `u` in place of the confidence and `lambda1 = xi`. The returned
/// thresholds therefore carry `lambda1 = xi`, and test-time selection is
/// [`apply_with_confidence`] with a fresh draw per test point.
pub fn rand_calibrate(cal: &[ScoredExample], config: &PipelineConfig, seed: u64) -> Result<CalibrationOutcome> {
    config.spec.validate()?;
    CalibrationData::new(cal.to_vec(), &config.loss)?;
    let xi = config.spec.coverage_target;
    let alpha = config.spec.risk_target;
    for attempt in 0..RAND_MAX_ATTEMPTS {
        let draws = uniform_draws(seed, RAND_CALIBRATION_STREAM + attempt as u64, cal.len());
        let kept: Vec<&ScoredExample> = cal
            .iter()
            .zip(&draws)
            .filter_map(|(e, &u)| select(u, xi).then_some(e))
            .collect();
        if crc_budget(kept.len(), alpha) <= 0 {
            log::debug!("RAND attempt {attempt}: {} points kept, redrawing", kept.len());
            continue;
        }
        let r = crc_lambda2(kept.iter().copied(), alpha, &config.loss)?;
        let lambda2 = r.lambda2_hat.unwrap();
        return Ok(CalibrationOutcome {
            thresholds: ThresholdPair::new(xi, lambda2, Method::Rand, None)?,
            grid_trace: vec![GridPoint {
                lambda1: xi,
                m: r.m,
                lambda2: Some(lambda2),
                mean_set_size: mean_set_size(&kept, lambda2),
                feasible: true,
                xi_lcb: None,
            }],
            objective: config.objective,
        });
    }
    Err(ScrcError::RandomSelectionTooSmall {
        needed: min_selected(alpha) + 1,
        attempts: RAND_MAX_ATTEMPTS,
    })
}

/// Calibrates with a fixed-threshold method. SCRC-T needs a test point and is
/// served by [`TransductiveCalibrator`] instead.
pub fn calibrate(
    method: Method,
    cal: &[ScoredExample],
    config: &PipelineConfig,
    seed: u64,
) -> Result<CalibrationOutcome> {
    match method {
        Method::ScrcI => scrc_i_calibrate(cal, config),
        Method::CrcAll => crc_all_calibrate(cal, config),
        Method::Rand => rand_calibrate(cal, config, seed),
        Method::ScrcT => Err(ScrcError::InvalidConfig(
            "SCRC-T thresholds depend on the test point; use TransductiveCalibrator".into(),
        )),
    }
}

/// Abstain when `g < 1 - lambda1`, otherwise the `lambda2` prediction set.
pub fn apply(thresholds: &ThresholdPair, example: &ScoredExample) -> SelectiveOutput {
    apply_with_confidence(thresholds, example, example.confidence())
}

/// [`apply`] with an externally supplied selection score (RAND's coin flip).
pub fn apply_with_confidence(thresholds: &ThresholdPair, example: &ScoredExample, g: f64) -> SelectiveOutput {
    if select(g, thresholds.lambda1) {
        SelectiveOutput::PredictionSet(prediction_set(example.probs(), thresholds.lambda2))
    } else {
        SelectiveOutput::Abstain
    }
}
