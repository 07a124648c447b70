//! Second-stage conformal risk control on the selected calibration points.
//!
//! `lambda2` is the smallest value whose summed calibration loss fits an
//! integer counting budget:
//!
//! * plain selective CRC: budget `ceil((m + 1) alpha) - 1` over the `m`
//!   selected points;
//! * calibration-only (augmented) CRC: budget `ceil((n + 1) alpha xi_lcb) - 1`
//!   over all `n` calibration points, with unselected points contributing 0.
//!
//! Every loss here is a function of the prediction set, and a set only changes
//! when `1 - lambda2` crosses one of the probabilities, so the loss sum is a
//! right-continuous step function with jumps at `lambda2 = 1 - p_ik`. The
//! solvers search those candidates exactly; [`bisect_lambda2`] is the fallback
//! for loss families that are only known to be monotone.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrcError};
use crate::numeric::{ceil_int, lambda_admitting, ROUNDING_SLACK};
use crate::sets::{prediction_set, prediction_set_size, LossKind};
use crate::types::ScoredExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTwoResult {
    /// Present only when `feasible`.
    pub lambda2_hat: Option<f64>,
    /// Number of selected calibration points.
    pub m: usize,
    pub budget: i64,
    pub feasible: bool,
}

/// `m_min = ceil(1 / alpha) - 1`. Fewer selected points can never yield a
/// positive budget.
pub fn min_selected(alpha: f64) -> usize {
    (ceil_int(1.0 / alpha) - 1).max(0) as usize
}

/// `ceil((m + 1) alpha) - 1`.
pub fn crc_budget(m: usize, alpha: f64) -> i64 {
    ceil_int((m + 1) as f64 * alpha) - 1
}

/// `(n + 1) alpha xi_lcb`; the calibration-only stage is feasible iff this is
/// at least 1.
pub fn augmented_budget_product(n: usize, alpha: f64, xi_lcb: f64) -> f64 {
    (n + 1) as f64 * alpha * xi_lcb
}

pub fn augmented_feasible(n: usize, alpha: f64, xi_lcb: f64) -> bool {
    augmented_budget_product(n, alpha, xi_lcb) >= 1.0 - ROUNDING_SLACK
}

/// `ceil((n + 1) alpha xi_lcb) - 1`.
pub fn augmented_budget(n: usize, alpha: f64, xi_lcb: f64) -> i64 {
    ceil_int(augmented_budget_product(n, alpha, xi_lcb)) - 1
}

/// `sum_i loss(C_lambda2(x_i), y_i)`.
pub fn empirical_loss_sum(points: &[&ScoredExample], lambda2: f64, loss: &LossKind) -> Result<f64> {
    let mut total = 0.0;
    for p in points {
        let y = p.require_label()?;
        total += loss.loss(&prediction_set(p.probs(), lambda2), y);
    }
    Ok(total)
}

/// Mean `|C_lambda2(x)|` over `points`, `None` when empty.
pub fn mean_set_size(points: &[&ScoredExample], lambda2: f64) -> Option<f64> {
    crate::numeric::mean(points.iter().map(|p| prediction_set_size(p.probs(), lambda2) as f64))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(ScrcError::OutOfRange {
            what: "alpha",
            value: alpha,
            bounds: "(0, 1]",
        })
    }
}

/// Smallest `lambda2` in `[0, 1]` with `sum_i loss <= budget`, for a budget
/// that is already known to be non-negative.
///
/// Returns 1 if even the full label set exceeds the budget.
pub fn solve_lambda2(points: &[&ScoredExample], budget: usize, loss: &LossKind) -> Result<f64> {
    for p in points {
        p.require_label()?;
        loss.check_classes(p.n_classes())?;
    }
    if let LossKind::Miscoverage = loss {
        let lambda = miscoverage_candidate(points, budget);
        if empirical_loss_sum(points, lambda, loss)? <= budget as f64 {
            return Ok(lambda);
        }
        log::debug!("miscoverage fast path missed the budget; falling back to candidate scan");
    }
    candidate_scan(points, budget, loss)
}

/// Miscoverage loss is `1{p_i(y_i) < 1 - lambda2}`: at most `budget` true-label
/// probabilities may sit below the cut, so the cut is the `(budget+1)`-th
/// smallest of them.
fn miscoverage_candidate(points: &[&ScoredExample], budget: usize) -> f64 {
    if budget >= points.len() {
        return 0.0;
    }
    let mut true_probs: Vec<f64> = points
        .iter()
        .map(|p| p.probs()[p.label().expect("checked by caller")])
        .collect();
    let (_, t, _) = true_probs.select_nth_unstable_by(budget, f64::total_cmp);
    lambda_admitting(*t)
}

fn candidate_scan(points: &[&ScoredExample], budget: usize, loss: &LossKind) -> Result<f64> {
    let mut candidates: Vec<f64> = std::iter::once(0.0)
        .chain(std::iter::once(1.0))
        .chain(
            points
                .iter()
                .flat_map(|p| p.probs().iter().map(|&q| lambda_admitting(q))),
        )
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let budget = budget as f64;
    // loss sum is non-increasing along the sorted candidates
    let (mut lo, mut hi) = (0usize, candidates.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if empirical_loss_sum(points, candidates[mid], loss)? <= budget {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(candidates.get(lo).copied().unwrap_or(1.0))
}

/// Bisection on a non-increasing loss sum. Returns the feasible end of the
/// final bracket, so the constraint holds at the returned value.
pub fn bisect_lambda2(loss_sum: impl Fn(f64) -> f64, budget: f64, tolerance: f64) -> f64 {
    if loss_sum(0.0) <= budget {
        return 0.0;
    }
    if loss_sum(1.0) > budget {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        if loss_sum(mid) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Selective CRC on the selected calibration subset.
pub fn crc_lambda2<'a>(
    selected: impl IntoIterator<Item = &'a ScoredExample>,
    alpha: f64,
    loss: &LossKind,
) -> Result<StageTwoResult> {
    check_alpha(alpha)?;
    let points: Vec<&ScoredExample> = selected.into_iter().collect();
    let m = points.len();
    let budget = crc_budget(m, alpha);
    if budget <= 0 {
        return Err(ScrcError::Infeasible {
            selected: m,
            budget,
            m_min: min_selected(alpha),
        });
    }
    let lambda2 = solve_lambda2(&points, budget as usize, loss)?;
    Ok(StageTwoResult {
        lambda2_hat: Some(lambda2),
        m,
        budget,
        feasible: true,
    })
}

/// Calibration-only CRC on the augmented loss `S'(x) l(C_lambda2(x), y)` over
/// all calibration points.
pub fn augmented_crc_lambda2(
    all_cal: &[ScoredExample],
    selected: &[bool],
    alpha: f64,
    xi_lcb: f64,
    loss: &LossKind,
) -> Result<StageTwoResult> {
    check_alpha(alpha)?;
    if all_cal.len() != selected.len() {
        return Err(ScrcError::InvalidConfig(format!(
            "{} calibration points but {} selection flags",
            all_cal.len(),
            selected.len()
        )));
    }
    if all_cal.is_empty() {
        return Err(ScrcError::InvalidConfig("no calibration points".into()));
    }
    let points: Vec<&ScoredExample> = all_cal
        .iter()
        .zip(selected)
        .filter_map(|(e, &s)| s.then_some(e))
        .collect();
    augmented_on_selected(&points, all_cal.len(), alpha, xi_lcb, loss)
}

/// Same as [`augmented_crc_lambda2`] when the caller already holds the
/// selected subset; unselected points add nothing to the loss sum.
pub(crate) fn augmented_on_selected(
    points: &[&ScoredExample],
    n: usize,
    alpha: f64,
    xi_lcb: f64,
    loss: &LossKind,
) -> Result<StageTwoResult> {
    if !augmented_feasible(n, alpha, xi_lcb) {
        return Err(ScrcError::InfeasibleLowerBound {
            product: augmented_budget_product(n, alpha, xi_lcb),
        });
    }
    let budget = augmented_budget(n, alpha, xi_lcb);
    let lambda2 = solve_lambda2(points, budget.max(0) as usize, loss)?;
    Ok(StageTwoResult {
        lambda2_hat: Some(lambda2),
        m: points.len(),
        budget,
        feasible: true,
    })
}
