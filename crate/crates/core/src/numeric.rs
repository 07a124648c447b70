//! Rounding helpers shared by the threshold solvers.
//!
//! Targets such as `xi = 0.6` are decimal fractions, so products like
//! `5 * (1 - 0.6)` land a few ulps away from the integer they denote. The
//! counting rules are defined on exact rationals; `ROUNDING_SLACK` absorbs the
//! representation error before flooring or ceiling.

pub(crate) const ROUNDING_SLACK: f64 = 1e-9;

/// `floor(x)` for a non-negative product of decimal inputs.
pub(crate) fn floor_count(x: f64) -> usize {
    let f = (x + ROUNDING_SLACK).floor();
    if f <= 0.0 {
        0
    } else {
        f as usize
    }
}

/// `ceil(x)` for a product of decimal inputs.
pub(crate) fn ceil_int(x: f64) -> i64 {
    (x - ROUNDING_SLACK).ceil() as i64
}

/// Smallest `lambda` in `[0, 1]` for which `1.0 - lambda <= t` holds in
/// floating point.
///
/// Every threshold rule in this crate admits a value `v` iff `v >= 1 - lambda`,
/// so this is the exact point at which `t` becomes admitted. Computing
/// `1.0 - t` alone can land one ulp short.
pub(crate) fn lambda_admitting(t: f64) -> f64 {
    if t >= 1.0 {
        return 0.0;
    }
    if t <= 0.0 {
        return 1.0;
    }
    let mut lambda = 1.0 - t;
    while lambda < 1.0 && 1.0 - lambda > t {
        lambda = lambda.next_up();
    }
    while lambda > 0.0 && 1.0 - lambda.next_down() <= t {
        lambda = lambda.next_down();
    }
    lambda
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        n += 1;
        sum += v;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Sample mean and standard error (`sd / sqrt(n)`, Bessel-corrected).
pub(crate) fn mean_and_se(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    let m = mean(values.iter().copied())?;
    if n < 2 {
        return Some((m, 0.0));
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Some((m, (var / n as f64).sqrt()))
}
