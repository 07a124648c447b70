//! First-stage selection.
//!
//! An input is accepted when `g(x) >= 1 - lambda1`. The calibrated `lambda1`
//! is the smallest value whose empirical rejection rate is at most `1 - xi`,
//! where the rate is taken either over the calibration points plus the test
//! point (transductive) or over the calibration points alone.
//!
//! The empirical rejection count `#{i : g_i < 1 - lambda1}` is a step function
//! of `lambda1` that only jumps at `lambda1 = 1 - g_(j)`, so the infimum over
//! the continuum `[0, 1]` is read straight off the order statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrcError};
use crate::numeric::{floor_count, lambda_admitting};

/// First-stage loss `1{g < 1 - lambda1}`.
pub fn stage1_loss(g: f64, lambda1: f64) -> u8 {
    u8::from(g < 1.0 - lambda1)
}

/// Selection rule `g >= 1 - lambda1`.
pub fn select(g: f64, lambda1: f64) -> bool {
    g >= 1.0 - lambda1
}

/// Largest number of rejected points among `n_total` that keeps the empirical
/// rejection rate at or below `1 - xi`.
pub fn allowed_rejections(n_total: usize, xi: f64) -> usize {
    floor_count(n_total as f64 * (1.0 - xi))
}

/// DKW half-width `sqrt(ln(2 / delta) / (2 n))`.
pub fn dkw_half_width(n: usize, delta: f64) -> f64 {
    assert!(n >= 1, "DKW half-width needs n >= 1");
    ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// `max(xi_hat - epsilon, 0)`.
pub fn xi_lower_bound(xi_hat: f64, epsilon: f64) -> f64 {
    (xi_hat - epsilon).max(0.0)
}

/// Calibration confidences sorted ascending, shared read-only by every
/// per-test-point threshold computation.
#[derive(Debug, Clone)]
pub struct SortedConfidences {
    ascending: Vec<f64>,
}

impl SortedConfidences {
    pub fn new(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut ascending: Vec<f64> = values.into_iter().collect();
        if ascending.is_empty() {
            return Err(ScrcError::InvalidConfig(
                "first stage needs at least one calibration point".into(),
            ));
        }
        if let Some(&bad) = ascending.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(ScrcError::OutOfRange {
                what: "confidence",
                value: bad,
                bounds: "[0, 1]",
            });
        }
        ascending.sort_by(f64::total_cmp);
        Ok(Self { ascending })
    }

    pub fn len(&self) -> usize {
        self.ascending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ascending.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.ascending
    }

    /// `k`-th smallest (1-based) of the calibration values pooled with `extra`.
    fn pooled_order_statistic(&self, extra: f64, k: usize) -> f64 {
        let c = &self.ascending;
        let below = if k >= 2 { c[k - 2] } else { f64::NEG_INFINITY };
        let at = if k <= c.len() { c[k - 1] } else { f64::INFINITY };
        extra.max(below).min(at)
    }

    /// Transductive threshold: pools the test confidence with the calibration
    /// confidences, so the result is symmetric in all `n + 1` values.
    pub fn transductive_lambda1(&self, test_g: f64, xi: f64) -> f64 {
        let pooled = self.len() + 1;
        let budget = allowed_rejections(pooled, xi);
        if budget >= pooled {
            return 0.0;
        }
        lambda_admitting(self.pooled_order_statistic(test_g, budget + 1))
    }

    /// Calibration-only threshold over the `n` calibration confidences.
    pub fn calibration_only_lambda1(&self, xi: f64) -> f64 {
        let n = self.len();
        let budget = allowed_rejections(n, xi);
        if budget >= n {
            return 0.0;
        }
        lambda_admitting(self.ascending[budget])
    }

    /// Number of calibration points with `g >= 1 - lambda1`.
    pub fn count_selected(&self, lambda1: f64) -> usize {
        let rejected = self.ascending.partition_point(|&g| !select(g, lambda1));
        self.len() - rejected
    }
}

/// Smallest `lambda1` with `#{i <= n+1 : g_i < 1 - lambda1} <= floor((n+1)(1-xi))`.
pub fn transductive_lambda1(cal_g: &[f64], test_g: f64, xi: f64) -> Result<f64> {
    check_xi(xi)?;
    Ok(SortedConfidences::new(cal_g.iter().copied())?.transductive_lambda1(test_g, xi))
}

/// Smallest `lambda1` with `#{i <= n : g_i < 1 - lambda1} <= floor(n(1-xi))`.
pub fn calibration_only_lambda1(cal_g: &[f64], xi: f64) -> Result<f64> {
    check_xi(xi)?;
    Ok(SortedConfidences::new(cal_g.iter().copied())?.calibration_only_lambda1(xi))
}

fn check_xi(xi: f64) -> Result<()> {
    if (0.0..=1.0).contains(&xi) {
        Ok(())
    } else {
        Err(ScrcError::OutOfRange {
            what: "xi",
            value: xi,
            bounds: "[0, 1]",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOneMode {
    Transductive,
    CalibrationOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOneResult {
    pub lambda1_hat: f64,
    pub mode: StageOneMode,
    /// Empirical calibration selection rate (calibration-only mode).
    pub xi_hat: Option<f64>,
    pub epsilon: Option<f64>,
    pub xi_lcb: Option<f64>,
}

impl StageOneResult {
    pub fn transductive(cal: &SortedConfidences, test_g: f64, xi: f64) -> Self {
        Self {
            lambda1_hat: cal.transductive_lambda1(test_g, xi),
            mode: StageOneMode::Transductive,
            xi_hat: None,
            epsilon: None,
            xi_lcb: None,
        }
    }

    pub fn calibration_only(cal: &SortedConfidences, xi: f64, delta: f64) -> Self {
        let lambda1_hat = cal.calibration_only_lambda1(xi);
        Self::calibration_only_at(cal, lambda1_hat, delta)
    }

    /// Calibration-only bookkeeping at an arbitrary `lambda1`.
    pub fn calibration_only_at(cal: &SortedConfidences, lambda1: f64, delta: f64) -> Self {
        let n = cal.len();
        let xi_hat = cal.count_selected(lambda1) as f64 / n as f64;
        let epsilon = dkw_half_width(n, delta);
        Self {
            lambda1_hat: lambda1,
            mode: StageOneMode::CalibrationOnly,
            xi_hat: Some(xi_hat),
            epsilon: Some(epsilon),
            xi_lcb: Some(xi_lower_bound(xi_hat, epsilon)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn loss_and_select_boundaries() {
        assert_eq!(stage1_loss(0.9, 0.2), 0);
        assert_eq!(stage1_loss(0.5, 0.2), 1);
        assert_eq!(stage1_loss(0.8, 0.2), 0);
        assert!(select(0.8, 0.2));
        assert!(!select(0.79, 0.2));
        assert!(select(0.0, 1.0));
    }

    #[test]
    fn transductive_examples() {
        let l = transductive_lambda1(&[0.9, 0.8, 0.7, 0.6], 0.85, 0.6).unwrap();
        assert!(close(l, 0.2, 1e-12), "{l}");
        assert!(select(0.8, l));
        let l = transductive_lambda1(&[0.5; 4], 0.5, 0.9).unwrap();
        assert!(close(l, 0.5, 1e-12), "{l}");
        assert_eq!(transductive_lambda1(&[0.5; 4], 0.3, 0.0).unwrap(), 0.0);
        // tiny xi still needs one point accepted: threshold at the maximum
        let l = transductive_lambda1(&[0.2, 0.4], 0.3, 1e-6).unwrap();
        assert!(close(l, 0.6, 1e-12));
    }

    #[test]
    fn calibration_only_examples() {
        let l = calibration_only_lambda1(&[0.9, 0.8, 0.7, 0.6], 0.5).unwrap();
        assert!(close(l, 0.2, 1e-12), "{l}");
        let l = calibration_only_lambda1(&[0.9, 0.8, 0.7, 0.6], 1.0).unwrap();
        assert!(close(l, 0.4, 1e-12), "{l}");
        assert!(select(0.6, l));
        let l = calibration_only_lambda1(&[0.3], 0.9).unwrap();
        assert!(close(l, 0.7, 1e-12), "{l}");
    }

    #[test]
    fn pooled_order_statistic_matches_sorting() {
        let cal = SortedConfidences::new([0.1, 0.5, 0.5, 0.9]).unwrap();
        for &g in &[0.0, 0.1, 0.3, 0.5, 0.7, 0.95] {
            let mut pooled = [0.1, 0.5, 0.5, 0.9, g];
            pooled.sort_by(f64::total_cmp);
            for k in 1..=5 {
                assert_eq!(cal.pooled_order_statistic(g, k), pooled[k - 1], "g={g} k={k}");
            }
        }
    }

    #[test]
    fn count_selected_agrees_with_rule() {
        let values = [0.1, 0.5, 0.5, 0.8, 0.9];
        let cal = SortedConfidences::new(values).unwrap();
        for &l in &[0.0, 0.1, 0.2, 0.5, 0.9, 1.0] {
            let direct = values.iter().filter(|&&g| select(g, l)).count();
            assert_eq!(cal.count_selected(l), direct);
        }
    }

    #[test]
    fn dkw_examples() {
        // sqrt(ln 40 / 400)
        assert!(close(dkw_half_width(200, 0.05), 0.09603, 1e-5));
        // delta -> 1: sqrt(ln 2 / 400)
        assert!(close(dkw_half_width(200, 1.0 - 1e-12), 0.04163, 1e-5));
        assert!(dkw_half_width(10_000, 0.05) < dkw_half_width(100, 0.05));
    }

    #[test]
    fn lower_bound_examples() {
        assert!(close(xi_lower_bound(0.7, 0.0960), 0.6040, 1e-12));
        assert_eq!(xi_lower_bound(0.05, 0.1), 0.0);
        assert_eq!(xi_lower_bound(0.7, 0.0), 0.7);
    }

    #[test]
    fn calibration_only_stage_bookkeeping() {
        let cal = SortedConfidences::new([0.9, 0.8, 0.7, 0.6]).unwrap();
        let r = StageOneResult::calibration_only(&cal, 0.5, 0.05);
        assert!(close(r.lambda1_hat, 0.2, 1e-12));
        // two rejections allowed; 0.9 and 0.8 remain
        assert_eq!(r.xi_hat, Some(0.5));
        let eps = dkw_half_width(4, 0.05);
        assert_eq!(r.xi_lcb, Some(xi_lower_bound(0.5, eps)));
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        assert!(SortedConfidences::new([0.5, 1.5]).is_err());
        assert!(SortedConfidences::new(std::iter::empty()).is_err());
        assert!(transductive_lambda1(&[0.5], 0.5, 1.5).is_err());
    }
}
