//! Prediction sets `C(x) = {k : f(x)_k >= 1 - lambda2}` and the bounded,
//! set-monotone losses the second stage controls.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrcError};

/// Loss of a prediction set against the true label, in `[0, 1]` and
/// non-increasing as the set grows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    /// `1{y not in set}`.
    Miscoverage,
    /// `w(d)` where `d` is the ordinal distance from `y` to the nearest class
    /// in the set; the empty set costs 1. `weights[d]` for `d in 0..K`.
    WeightedOrdinal { weights: Vec<f64> },
}

impl LossKind {
    /// Ordinal loss with linear weights `w(d) = d / (K - 1)`.
    pub fn linear_ordinal(n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(ScrcError::InvalidConfig("ordinal loss needs K >= 2".into()));
        }
        let denom = (n_classes - 1) as f64;
        Self::ordinal((0..n_classes).map(|d| d as f64 / denom).collect())
    }

    /// Ordinal loss with an explicit weight table. The table must start at 0,
    /// be non-decreasing, and end at 1.
    pub fn ordinal(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(ScrcError::InvalidConfig(
                "ordinal weight table needs at least 2 entries".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ScrcError::NonFinite("ordinal weights"));
        }
        if weights[0] != 0.0 {
            return Err(ScrcError::InvalidConfig("ordinal weights must start at 0".into()));
        }
        if weights.windows(2).any(|w| w[1] < w[0]) {
            return Err(ScrcError::InvalidConfig(
                "ordinal weights must be non-decreasing".into(),
            ));
        }
        if *weights.last().unwrap() != 1.0 {
            return Err(ScrcError::InvalidConfig("ordinal weights must end at 1".into()));
        }
        Ok(LossKind::WeightedOrdinal { weights })
    }

    /// Checks the loss is usable with `n_classes` classes.
    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        match self {
            LossKind::Miscoverage => Ok(()),
            LossKind::WeightedOrdinal { weights } if weights.len() == n_classes => Ok(()),
            LossKind::WeightedOrdinal { weights } => Err(ScrcError::InvalidConfig(format!(
                "ordinal weight table has {} entries for {n_classes} classes",
                weights.len()
            ))),
        }
    }

    /// `set` must be sorted ascending (as returned by [`prediction_set`]).
    pub fn loss(&self, set: &[usize], y: usize) -> f64 {
        match self {
            LossKind::Miscoverage => miscoverage_loss(set, y),
            LossKind::WeightedOrdinal { weights } => weighted_ordinal_loss(set, y, weights),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Miscoverage => f.write_str("miscoverage"),
            LossKind::WeightedOrdinal { .. } => f.write_str("ordinal"),
        }
    }
}

/// Sorted 0-based classes with `probs[k] >= 1 - lambda2`.
pub fn prediction_set(probs: &[f64], lambda2: f64) -> Vec<usize> {
    let cut = 1.0 - lambda2;
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= cut)
        .map(|(k, _)| k)
        .collect()
}

/// `|prediction_set(probs, lambda2)|` without allocating.
pub fn prediction_set_size(probs: &[f64], lambda2: f64) -> usize {
    let cut = 1.0 - lambda2;
    probs.iter().filter(|&&p| p >= cut).count()
}

pub fn miscoverage_loss(set: &[usize], y: usize) -> f64 {
    if set.binary_search(&y).is_ok() {
        0.0
    } else {
        1.0
    }
}

pub fn weighted_ordinal_loss(set: &[usize], y: usize, weights: &[f64]) -> f64 {
    match set.iter().map(|&k| k.abs_diff(y)).min() {
        None => 1.0,
        Some(d) => weights[d.min(weights.len() - 1)],
    }
}

pub fn set_size(set: &[usize]) -> usize {
    set.len()
}
