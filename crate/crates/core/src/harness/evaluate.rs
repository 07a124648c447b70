use crate::error::{Result, ScrcError};
use crate::numeric::mean;
use crate::pipeline::TransductiveCalibrator;
use crate::sets::{prediction_set, LossKind};
use crate::stage1::select;
use crate::types::{ScoredExample, ThresholdPair, TrialMetrics};

#[derive(Debug, Default)]
struct Tally {
    n_test: usize,
    n_selected: usize,
    loss_sum: f64,
    size_selected: usize,
    size_rejected: usize,
    n_rejected_sized: usize,
    all_calibrated: bool,
}

impl Tally {
    fn new() -> Self {
        Self {
            all_calibrated: true,
            ..Self::default()
        }
    }

    fn push(&mut self, e: &ScoredExample, selected: bool, lambda2: Option<f64>, loss: &LossKind) -> Result<()> {
        self.n_test += 1;
        let Some(lambda2) = lambda2 else {
            self.all_calibrated = false;
            return Ok(());
        };
        let set = prediction_set(e.probs(), lambda2);
        if selected {
            self.n_selected += 1;
            self.loss_sum += loss.loss(&set, e.require_label()?);
            self.size_selected += set.len();
        } else {
            self.size_rejected += set.len();
            self.n_rejected_sized += 1;
        }
        Ok(())
    }

    fn finish(self) -> TrialMetrics {
        let ratio = |num: f64, den: usize| (den > 0).then(|| num / den as f64);
        TrialMetrics {
            selective_coverage: self.n_selected as f64 / self.n_test as f64,
            selective_risk: ratio(self.loss_sum, self.n_selected),
            mean_set_size_selected: ratio(self.size_selected as f64, self.n_selected),
            mean_set_size_rejected: ratio(self.size_rejected as f64, self.n_rejected_sized),
            n_selected: self.n_selected,
            n_test: self.n_test,
            feasible: self.all_calibrated,
        }
    }
}

fn check_nonempty(test: &[ScoredExample]) -> Result<()> {
    if test.is_empty() {
        Err(ScrcError::InvalidConfig(
            "evaluation needs at least one test point".into(),
        ))
    } else {
        Ok(())
    }
}

/// Empirical selective metrics of fixed thresholds on labelled test points.
///
/// Rejected points are sized with the same `lambda2` they would have received
/// had they been accepted.
pub fn evaluate(thresholds: &ThresholdPair, test: &[ScoredExample], loss: &LossKind) -> Result<TrialMetrics> {
    check_nonempty(test)?;
    let mut tally = Tally::new();
    for e in test {
        tally.push(
            e,
            select(e.confidence(), thresholds.lambda1),
            Some(thresholds.lambda2),
            loss,
        )?;
    }
    Ok(tally.finish())
}

/// [`evaluate`] with the selection score of test point `i` replaced by
/// `confidences[i]`.
pub fn evaluate_with_confidences(
    thresholds: &ThresholdPair,
    test: &[ScoredExample],
    confidences: &[f64],
    loss: &LossKind,
) -> Result<TrialMetrics> {
    check_nonempty(test)?;
    if confidences.len() != test.len() {
        return Err(ScrcError::InvalidConfig(format!(
            "{} selection scores for {} test points",
            confidences.len(),
            test.len()
        )));
    }
    let mut tally = Tally::new();
    for (e, &g) in test.iter().zip(confidences) {
        tally.push(e, select(g, thresholds.lambda1), Some(thresholds.lambda2), loss)?;
    }
    Ok(tally.finish())
}

/// SCRC-T metrics plus the mean per-point thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct TransductiveEvaluation {
    pub metrics: TrialMetrics,
    pub mean_lambda1: Option<f64>,
    pub mean_lambda2: Option<f64>,
}

/// Calibrates SCRC-T separately for every test point and scores the result.
///
/// A test point with no feasible grid point abstains; its trial is then
/// flagged infeasible.
pub fn evaluate_transductive(
    calibrator: &TransductiveCalibrator,
    test: &[ScoredExample],
    loss: &LossKind,
) -> Result<TransductiveEvaluation> {
    check_nonempty(test)?;
    let mut tally = Tally::new();
    let mut thresholds = Vec::with_capacity(test.len());
    for e in test {
        match calibrator.thresholds_for(e.confidence()) {
            Ok(t) => {
                tally.push(e, select(e.confidence(), t.lambda1), Some(t.lambda2), loss)?;
                thresholds.push(t);
            }
            Err(err) if err.is_infeasible() => tally.push(e, false, None, loss)?,
            Err(err) => return Err(err),
        }
    }
    Ok(TransductiveEvaluation {
        metrics: tally.finish(),
        mean_lambda1: mean(thresholds.iter().map(|t| t.lambda1)),
        mean_lambda2: mean(thresholds.iter().map(|t| t.lambda2)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Method;

    fn ex(probs: &[f64], g: f64, y: usize) -> ScoredExample {
        ScoredExample::new(probs.to_vec(), g, Some(y), None).unwrap()
    }

    #[test]
    fn select_all_has_full_coverage_and_no_rejected_size() {
        let t = ThresholdPair::new(1.0, 0.5, Method::CrcAll, None).unwrap();
        let test = [ex(&[0.6, 0.4], 0.0, 0), ex(&[0.3, 0.7], 0.2, 0)];
        let m = evaluate(&t, &test, &LossKind::Miscoverage).unwrap();
        assert_eq!(m.selective_coverage, 1.0);
        assert_eq!(m.mean_set_size_rejected, None);
        assert_eq!(m.selective_risk, Some(0.5));
    }

    #[test]
    fn full_sets_have_zero_risk() {
        let t = ThresholdPair::new(1.0, 1.0, Method::CrcAll, None).unwrap();
        let test = [ex(&[0.6, 0.3, 0.1], 0.5, 2)];
        let m = evaluate(&t, &test, &LossKind::Miscoverage).unwrap();
        assert_eq!(m.selective_risk, Some(0.0));
        assert_eq!(m.mean_set_size_selected, Some(3.0));
    }

    #[test]
    fn one_selected_one_rejected() {
        let t = ThresholdPair::new(0.2, 0.5, Method::ScrcI, Some(0.5)).unwrap();
        let test = [ex(&[0.9, 0.1], 0.9, 0), ex(&[0.5, 0.5], 0.1, 1)];
        let m = evaluate(&t, &test, &LossKind::Miscoverage).unwrap();
        assert_eq!(m.selective_coverage, 0.5);
        assert_eq!(m.selective_risk, Some(0.0));
        assert_eq!(m.mean_set_size_rejected, Some(2.0));
        assert_eq!(m.n_selected, 1);
    }

    #[test]
    fn nothing_selected_leaves_risk_undefined() {
        let t = ThresholdPair::new(0.0, 0.5, Method::ScrcI, Some(0.1)).unwrap();
        let test = [ex(&[0.9, 0.1], 0.5, 0)];
        let m = evaluate(&t, &test, &LossKind::Miscoverage).unwrap();
        assert_eq!(m.selective_coverage, 0.0);
        assert_eq!(m.selective_risk, None);
        assert_eq!(m.mean_set_size_selected, None);
    }

    #[test]
    fn empty_test_is_an_error() {
        let t = ThresholdPair::new(1.0, 0.5, Method::CrcAll, None).unwrap();
        assert!(evaluate(&t, &[], &LossKind::Miscoverage).is_err());
    }
}
