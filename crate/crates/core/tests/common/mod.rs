//! Brute-force oracles, random instances and property checks shared by the
//! integration test targets.
//!
//! The oracles recompute every threshold from its defining inequality on a
//! uniform grid, using none of the library's solvers or rounding helpers.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrc_core::data::{generate, split_counts, SynthConfig};
use scrc_core::stage1::{transductive_lambda1, SortedConfidences, StageOneResult};
use scrc_core::stage2::{
    augmented_crc_lambda2, augmented_feasible, crc_budget, crc_lambda2, min_selected, solve_lambda2,
};
use scrc_core::{prediction_set, LossKind, ScoreKind, ScoredExample, Scorer};

pub const GRID_STEP: f64 = 1e-4;
const GRID_POINTS: u32 = 10_000;

fn grid() -> impl Iterator<Item = f64> {
    (0..=GRID_POINTS).map(|i| f64::from(i) / f64::from(GRID_POINTS))
}

/// Loss recomputed from scratch: the set is `{k : p_k >= 1 - lambda}`.
fn oracle_loss(probs: &[f64], y: usize, lambda: f64, ordinal: bool) -> f64 {
    let set: Vec<usize> = (0..probs.len()).filter(|&k| probs[k] >= 1.0 - lambda).collect();
    if ordinal {
        match set.iter().map(|&k| k.abs_diff(y)).min() {
            None => 1.0,
            Some(d) => d as f64 / (probs.len() - 1) as f64,
        }
    } else if set.contains(&y) {
        0.0
    } else {
        1.0
    }
}

fn loss_sum(points: &[&ScoredExample], lambda: f64, ordinal: bool) -> f64 {
    points
        .iter()
        .map(|e| oracle_loss(e.probs(), e.label().unwrap(), lambda, ordinal))
        .sum()
}

pub fn brute_transductive_lambda1(cal_g: &[f64], test_g: f64, xi: f64) -> f64 {
    let pooled: Vec<f64> = cal_g.iter().copied().chain([test_g]).collect();
    let allowed = (pooled.len() as f64 * (1.0 - xi)).floor();
    grid()
        .find(|&l| pooled.iter().filter(|&&g| g < 1.0 - l).count() as f64 <= allowed)
        .unwrap()
}

pub fn brute_calibration_only_lambda1(cal_g: &[f64], xi: f64) -> f64 {
    let allowed = (cal_g.len() as f64 * (1.0 - xi)).floor();
    grid()
        .find(|&l| cal_g.iter().filter(|&&g| g < 1.0 - l).count() as f64 <= allowed)
        .unwrap()
}

/// Smallest grid `lambda2` whose loss sum fits `ceil((m + 1) alpha) - 1`;
/// `None` when that budget is not positive.
pub fn brute_crc_lambda2(points: &[&ScoredExample], alpha: f64, ordinal: bool) -> Option<f64> {
    let budget = ((points.len() + 1) as f64 * alpha).ceil() - 1.0;
    if budget <= 0.0 {
        return None;
    }
    Some(grid().find(|&l| loss_sum(points, l, ordinal) <= budget).unwrap_or(1.0))
}

/// Calibration-only threshold for a given `lambda1`, rebuilt from the
/// selection indicator, the DKW width and the augmented budget.
pub fn brute_augmented_lambda2(
    cal: &[ScoredExample],
    lambda1: f64,
    alpha: f64,
    delta: f64,
    ordinal: bool,
) -> Option<f64> {
    let n = cal.len() as f64;
    let selected: Vec<&ScoredExample> = cal.iter().filter(|e| e.confidence() >= 1.0 - lambda1).collect();
    let xi_hat = selected.len() as f64 / n;
    let eps = ((2.0 / delta).ln() / (2.0 * n)).sqrt();
    let product = (n + 1.0) * alpha * (xi_hat - eps).max(0.0);
    if product < 1.0 {
        return None;
    }
    let budget = product.ceil() - 1.0;
    Some(
        grid()
            .find(|&l| loss_sum(&selected, l, ordinal) <= budget)
            .unwrap_or(1.0),
    )
}

/// Margin-scored calibration and test sets from the default generator.
pub fn synthetic_scored(n_cal: usize, n_test: usize, seed: u64) -> (Vec<ScoredExample>, Vec<ScoredExample>) {
    let records = generate(&SynthConfig {
        n_samples: n_cal + n_test,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let (cal, test) = split_counts(&records, n_cal, n_test, seed).unwrap();
    let scorer = Scorer::fit(ScoreKind::default(), cal.iter().map(|r| r.logits.as_slice())).unwrap();
    let score = |rs: &[scrc_core::data::LogitRecord]| -> Vec<ScoredExample> {
        rs.iter()
            .map(|r| scorer.score(&r.logits, Some(r.label)).unwrap())
            .collect()
    };
    (score(&cal), score(&test))
}

/// A random small calibration problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub cal: Vec<ScoredExample>,
    pub test_g: f64,
    pub xi: f64,
    pub alpha: f64,
    pub delta: f64,
    pub lambda1: f64,
    pub ordinal: bool,
}

impl Instance {
    pub fn loss(&self) -> LossKind {
        if self.ordinal {
            LossKind::linear_ordinal(self.cal[0].n_classes()).unwrap()
        } else {
            LossKind::Miscoverage
        }
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.cal.iter().map(ScoredExample::confidence).collect()
    }
}

/// Values in `[0, 1]`, with frequent exact ties on tenths.
pub fn unit_value() -> impl Strategy<Value = f64> {
    prop_oneof![0.0..=1.0f64, (0..=10u32).prop_map(|i| f64::from(i) / 10.0)]
}

pub fn example(k: usize) -> impl Strategy<Value = ScoredExample> {
    (prop::collection::vec(0.001..1.0f64, k), unit_value(), 0..k).prop_map(|(w, g, y)| {
        let total: f64 = w.iter().sum();
        let probs = w.iter().map(|x| x / total).collect();
        ScoredExample::new(probs, g, Some(y), None).unwrap()
    })
}

pub fn instance(max_n: usize, max_k: usize) -> impl Strategy<Value = Instance> {
    (2..=max_k, 1..=max_n).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(example(k), n),
            unit_value(),
            0.05..=1.0f64,
            0.05..0.95f64,
            0.01..0.5f64,
            unit_value(),
            any::<bool>(),
        )
            .prop_map(|(cal, test_g, xi, alpha, delta, lambda1, ordinal)| Instance {
                cal,
                test_g,
                xi,
                alpha,
                delta,
                lambda1,
                ordinal,
            })
    })
}

fn within_step(got: f64, want: f64) -> bool {
    (got - want).abs() <= GRID_STEP + 1e-12
}

pub fn check_stage1_oracle(inst: &Instance) -> Result<(), TestCaseError> {
    let g = inst.confidences();
    let sorted = SortedConfidences::new(g.iter().copied()).unwrap();
    let t = sorted.transductive_lambda1(inst.test_g, inst.xi);
    let bt = brute_transductive_lambda1(&g, inst.test_g, inst.xi);
    prop_assert!(within_step(t, bt), "transductive {t} vs brute {bt}");
    let c = sorted.calibration_only_lambda1(inst.xi);
    let bc = brute_calibration_only_lambda1(&g, inst.xi);
    prop_assert!(within_step(c, bc), "calibration-only {c} vs brute {bc}");
    Ok(())
}

pub fn check_crc_oracle(inst: &Instance) -> Result<(), TestCaseError> {
    let selected: Vec<&ScoredExample> = inst
        .cal
        .iter()
        .filter(|e| e.confidence() >= 1.0 - inst.lambda1)
        .collect();
    let got = crc_lambda2(selected.iter().copied(), inst.alpha, &inst.loss());
    let want = brute_crc_lambda2(&selected, inst.alpha, inst.ordinal);
    match (got, want) {
        (Ok(r), Some(b)) => {
            let l = r.lambda2_hat.unwrap();
            prop_assert!(within_step(l, b), "lambda2 {l} vs brute {b}");
        }
        (Err(e), None) => prop_assert!(e.is_infeasible()),
        (got, want) => prop_assert!(false, "feasibility mismatch: {got:?} vs {want:?}"),
    }
    Ok(())
}

pub fn check_augmented_oracle(inst: &Instance) -> Result<(), TestCaseError> {
    let sorted = SortedConfidences::new(inst.confidences()).unwrap();
    let stage1 = StageOneResult::calibration_only_at(&sorted, inst.lambda1, inst.delta);
    let flags: Vec<bool> = inst.cal.iter().map(|e| e.confidence() >= 1.0 - inst.lambda1).collect();
    let got = augmented_crc_lambda2(&inst.cal, &flags, inst.alpha, stage1.xi_lcb.unwrap(), &inst.loss());
    let want = brute_augmented_lambda2(&inst.cal, inst.lambda1, inst.alpha, inst.delta, inst.ordinal);
    match (got, want) {
        (Ok(r), Some(b)) => {
            let l = r.lambda2_hat.unwrap();
            prop_assert!(within_step(l, b), "lambda2 {l} vs brute {b}");
        }
        (Err(e), None) => prop_assert!(e.is_infeasible()),
        (got, want) => prop_assert!(false, "feasibility mismatch: {got:?} vs {want:?}"),
    }
    Ok(())
}

pub fn check_nested_sets(probs: &[f64], a: f64, b: f64) -> Result<(), TestCaseError> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let small = prediction_set(probs, lo);
    let large = prediction_set(probs, hi);
    prop_assert!(small.iter().all(|k| large.contains(k)), "{small:?} not in {large:?}");
    Ok(())
}

pub fn check_loss_monotone(e: &ScoredExample, a: f64, b: f64) -> Result<(), TestCaseError> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let y = e.label().unwrap();
    let k = e.n_classes();
    for loss in [LossKind::Miscoverage, LossKind::linear_ordinal(k).unwrap()] {
        let l_lo = loss.loss(&prediction_set(e.probs(), lo), y);
        let l_hi = loss.loss(&prediction_set(e.probs(), hi), y);
        prop_assert!(l_hi <= l_lo, "{loss}: loss({hi}) = {l_hi} > loss({lo}) = {l_lo}");
        prop_assert!((0.0..=1.0).contains(&l_lo));
    }
    Ok(())
}

pub fn check_lambda2_monotone_in_budget(inst: &Instance) -> Result<(), TestCaseError> {
    let points: Vec<&ScoredExample> = inst.cal.iter().collect();
    let loss = inst.loss();
    let mut prev = f64::INFINITY;
    for budget in 0..=points.len() {
        let l = solve_lambda2(&points, budget, &loss).unwrap();
        prop_assert!(l <= prev, "budget {budget}: {l} > {prev}");
        prev = l;
    }
    Ok(())
}

/// The transductive threshold depends only on the multiset of the `n + 1`
/// confidences, so any relabelling of which value is the test point is
/// irrelevant.
pub fn check_permutation_symmetry(pooled: &[f64], xi: f64, seed: u64) -> Result<(), TestCaseError> {
    let reference = transductive_lambda1(&pooled[..pooled.len() - 1], pooled[pooled.len() - 1], xi).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = pooled.to_vec();
    for _ in 0..100 {
        values.shuffle(&mut rng);
        let (test, cal) = values.split_last().unwrap();
        let l = transductive_lambda1(cal, *test, xi).unwrap();
        prop_assert_eq!(l.to_bits(), reference.to_bits());
    }
    Ok(())
}

/// `alpha = p / q`: `m_min = ceil(q / p) - 1`, and the budget is positive
/// exactly when `(m + 1) p > q`, both in integer arithmetic. Below `m_min` the
/// stage is always infeasible and above it always feasible; at `m_min` itself
/// it is feasible iff `1 / alpha` is not an integer.
pub fn check_m_min(p: u64, q: u64) -> Result<(), TestCaseError> {
    let alpha = p as f64 / q as f64;
    let exact_m_min = q.div_ceil(p) - 1;
    prop_assert_eq!(min_selected(alpha) as u64, exact_m_min);
    let lo = exact_m_min.saturating_sub(3);
    for m in lo..=exact_m_min + 3 {
        let positive = (m + 1) * p > q;
        prop_assert_eq!(crc_budget(m as usize, alpha) > 0, positive, "m = {}", m);
        let expected = match m.cmp(&exact_m_min) {
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => !q.is_multiple_of(p),
        };
        prop_assert_eq!(positive, expected, "m = {}", m);
    }
    Ok(())
}

/// `(p, q)` with `1 <= p < q`, so `alpha = p / q` lies in `(0, 1)`.
pub fn m_min_params() -> impl Strategy<Value = (u64, u64)> {
    (2..=1000u64).prop_flat_map(|q| (1..q, Just(q)))
}

/// `alpha = p / q`, `xi_lcb = r / s`: feasible exactly when
/// `(n + 1) p r >= q s`.
pub fn check_feasibility_gate(n: u64, p: u64, q: u64, r: u64, s: u64) -> Result<(), TestCaseError> {
    let alpha = p as f64 / q as f64;
    let xi_lcb = r as f64 / s as f64;
    let exact = (n + 1) * p * r >= q * s;
    prop_assert_eq!(
        augmented_feasible(n as usize, alpha, xi_lcb),
        exact,
        "n={} p/q={}/{} r/s={}/{}",
        n,
        p,
        q,
        r,
        s
    );
    Ok(())
}

/// Integer parameters for [`check_feasibility_gate`], concentrated near the
/// boundary `(n + 1) p r = q s`.
pub fn gate_params() -> impl Strategy<Value = (u64, u64, u64, u64, u64)> {
    (1..=200u64, 1..=400u64, 1..=400u64).prop_flat_map(|(p, r, s)| {
        let q_lo = p + 1;
        (Just(p), q_lo..=q_lo + 400, Just(r.min(s)), Just(s)).prop_flat_map(|(p, q, r, s)| {
            // n with (n + 1) p r close to q s.
            let pivot = (q * s) / (p * r).max(1);
            let lo = pivot.saturating_sub(2).max(1);
            (lo..=pivot + 2, Just(p), Just(q), Just(r), Just(s))
        })
    })
}
