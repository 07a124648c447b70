//! Domain types shared by every stage of the calibration pipeline.
//!
//! Class indices are 0-based in memory and 1-based in every external format
//! (CSV labels, serialized prediction sets). Conversion happens once, at the
//! edge.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, ScrcError};

/// Absolute tolerance on `sum(probs) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// One example as seen by the calibrator: the classifier's probability vector
/// `f(x)`, the selection score `g(x)`, and optionally the true label and the
/// raw logits the two were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    probs: Vec<f64>,
    confidence: f64,
    label: Option<usize>,
    logits: Option<Vec<f64>>,
}

impl ScoredExample {
    /// Builds and validates an example. `label` is 0-based.
    pub fn new(probs: Vec<f64>, confidence: f64, label: Option<usize>, logits: Option<Vec<f64>>) -> Result<Self> {
        validate_example(Self {
            probs,
            confidence,
            label,
            logits,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    /// 0-based true label, if known.
    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    pub(crate) fn require_label(&self) -> Result<usize> {
        self.label.ok_or(ScrcError::MissingLabel)
    }

    /// Same example with a different selection score.
    pub fn with_confidence(&self, confidence: f64) -> Result<Self> {
        check_unit("confidence", confidence)?;
        Ok(Self {
            confidence,
            ..self.clone()
        })
    }
}

fn check_unit(what: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ScrcError::OutOfRange {
            what,
            value,
            bounds: "[0, 1]",
        })
    }
}

/// Returns the example unchanged if every invariant holds.
pub fn validate_example(e: ScoredExample) -> Result<ScoredExample> {
    let k = e.probs.len();
    if k < 2 {
        return Err(ScrcError::InvalidConfig(format!("need at least 2 classes, got {k}")));
    }
    if e.probs.iter().any(|p| !p.is_finite()) {
        return Err(ScrcError::NonFinite("probs"));
    }
    let sum: f64 = e.probs.iter().sum();
    let min = e.probs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = e.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || min < 0.0 || max > 1.0 {
        return Err(ScrcError::NonSimplex { sum, min });
    }
    check_unit("confidence", e.confidence)?;
    if let Some(y) = e.label {
        if y >= k {
            return Err(ScrcError::OutOfRange {
                what: "label",
                value: (y + 1) as f64,
                bounds: "1..=K",
            });
        }
    }
    if let Some(logits) = &e.logits {
        if logits.len() != k {
            return Err(ScrcError::InvalidConfig(format!(
                "{} logits for {k} classes",
                logits.len()
            )));
        }
    }
    Ok(e)
}

/// Calibration targets: selective coverage `xi`, conditional risk `alpha`,
/// DKW confidence `delta`, and the first-stage grid step `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub coverage_target: f64,
    pub risk_target: f64,
    pub confidence_delta: f64,
    pub grid_step: f64,
}

impl RiskSpec {
    pub const DEFAULT_DELTA: f64 = 0.05;
    pub const DEFAULT_GRID_STEP: f64 = 0.01;

    pub fn new(xi: f64, alpha: f64, delta: f64, eta: f64) -> Result<Self> {
        let spec = Self {
            coverage_target: xi,
            risk_target: alpha,
            confidence_delta: delta,
            grid_step: eta,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `xi` and `alpha` with the default `delta` and `eta`.
    pub fn with_targets(xi: f64, alpha: f64) -> Result<Self> {
        Self::new(xi, alpha, Self::DEFAULT_DELTA, Self::DEFAULT_GRID_STEP)
    }

    pub fn validate(&self) -> Result<()> {
        let open = |what, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(ScrcError::OutOfRange {
                    what,
                    value: v,
                    bounds: "(0, 1)",
                })
            }
        };
        let half_open = |what, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(ScrcError::OutOfRange {
                    what,
                    value: v,
                    bounds: "(0, 1]",
                })
            }
        };
        half_open("xi", self.coverage_target)?;
        open("alpha", self.risk_target)?;
        open("delta", self.confidence_delta)?;
        half_open("eta", self.grid_step)
    }
}

/// Calibration method. Serialized with the names used in result files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SCRC-T")]
    ScrcT,
    #[serde(rename = "SCRC-I")]
    ScrcI,
    #[serde(rename = "CRC-ALL")]
    CrcAll,
    #[serde(rename = "RAND")]
    Rand,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ScrcT, Method::ScrcI, Method::CrcAll, Method::Rand];

    pub fn name(self) -> &'static str {
        match self {
            Method::ScrcT => "SCRC-T",
            Method::ScrcI => "SCRC-I",
            Method::CrcAll => "CRC-ALL",
            Method::Rand => "RAND",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ScrcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scrc-t" => Ok(Method::ScrcT),
            "scrc-i" => Ok(Method::ScrcI),
            "crc-all" => Ok(Method::CrcAll),
            "rand" => Ok(Method::Rand),
            other => Err(ScrcError::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Calibrated `(lambda1, lambda2)` and the method that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub lambda1: f64,
    pub lambda2: f64,
    pub method: Method,
    /// Lower confidence bound on the selection probability (SCRC-I only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub xi_lcb: Option<f64>,
}

impl ThresholdPair {
    pub fn new(lambda1: f64, lambda2: f64, method: Method, xi_lcb: Option<f64>) -> Result<Self> {
        check_unit("lambda1", lambda1)?;
        check_unit("lambda2", lambda2)?;
        if let Some(x) = xi_lcb {
            check_unit("xi_lcb", x)?;
        }
        if xi_lcb.is_some() != (method == Method::ScrcI) {
            return Err(ScrcError::InvalidConfig(
                "xi_lcb must be present exactly for SCRC-I thresholds".into(),
            ));
        }
        Ok(Self {
            lambda1,
            lambda2,
            method,
            xi_lcb,
        })
    }
}

/// Output for a single test input: abstain, or a set of 0-based class indices.
///
/// Text form is `ABSTAIN` or a 1-based sorted list such as `[1,3]` (`[]` for
/// the empty set).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectiveOutput {
    Abstain,
    PredictionSet(Vec<usize>),
}

impl SelectiveOutput {
    pub const ABSTAIN_TOKEN: &'static str = "ABSTAIN";

    /// Normalizes `classes` (sorted, deduplicated).
    pub fn set(mut classes: Vec<usize>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        SelectiveOutput::PredictionSet(classes)
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, SelectiveOutput::Abstain)
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            SelectiveOutput::Abstain => None,
            SelectiveOutput::PredictionSet(c) => Some(c),
        }
    }
}

impl fmt::Display for SelectiveOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectiveOutput::Abstain => f.write_str(Self::ABSTAIN_TOKEN),
            SelectiveOutput::PredictionSet(c) => {
                f.write_str("[")?;
                for (i, k) in c.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{}", k + 1)?;
                }
                f.write_str("]")
            }
        }
    }
}

impl FromStr for SelectiveOutput {
    type Err = ScrcError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ScrcError::Parse {
            line: 0,
            message: format!("not a selective output: `{s}`"),
        };
        if s == Self::ABSTAIN_TOKEN {
            return Ok(SelectiveOutput::Abstain);
        }
        let inner = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
        if inner.is_empty() {
            return Ok(SelectiveOutput::PredictionSet(Vec::new()));
        }
        let mut classes = Vec::new();
        for tok in inner.split(',') {
            let k: usize = tok.parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(bad());
            }
            classes.push(k - 1);
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad());
        }
        Ok(SelectiveOutput::PredictionSet(classes))
    }
}

impl Serialize for SelectiveOutput {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectiveOutput {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Empirical selective metrics of one calibrated method on one test split.
///
/// Fields that are undefined on an empty event (risk with nothing selected,
/// rejected-set size with nothing rejected) are `None` rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub selective_coverage: f64,
    pub selective_risk: Option<f64>,
    pub mean_set_size_selected: Option<f64>,
    pub mean_set_size_rejected: Option<f64>,
    pub n_selected: usize,
    pub n_test: usize,
    pub feasible: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_symmetric_simplex_point() {
        let e = ScoredExample::new(vec![0.5, 0.5], 0.3, Some(0), None).unwrap();
        assert_eq!(e.probs(), &[0.5, 0.5]);
        assert_eq!(e.label(), Some(0));
    }

    #[test]
    fn rejects_off_simplex() {
        let err = ScoredExample::new(vec![0.7, 0.2, 0.2], 0.5, None, None).unwrap_err();
        assert!(matches!(err, ScrcError::NonSimplex { .. }), "{err}");
        let err = ScoredExample::new(vec![1.2, -0.2], 0.5, None, None).unwrap_err();
        assert!(matches!(err, ScrcError::NonSimplex { .. }), "{err}");
    }

    #[test]
    fn rejects_out_of_range_confidence_and_label() {
        let err = ScoredExample::new(vec![1.0, 0.0], 1.2, None, None).unwrap_err();
        assert!(matches!(err, ScrcError::OutOfRange { what: "confidence", .. }));
        let err = ScoredExample::new(vec![1.0, 0.0], f64::NAN, None, None).unwrap_err();
        assert!(matches!(err, ScrcError::OutOfRange { .. }));
        let err = ScoredExample::new(vec![1.0, 0.0], 0.5, Some(2), None).unwrap_err();
        assert!(matches!(err, ScrcError::OutOfRange { what: "label", .. }));
    }

    #[test]
    fn tolerates_decimal_round_off() {
        ScoredExample::new(vec![0.1, 0.2, 0.7 + 5e-10], 0.5, None, None).unwrap();
    }

    #[test]
    fn risk_spec_bounds() {
        RiskSpec::new(1.0, 0.1, 0.05, 1.0).unwrap();
        assert!(RiskSpec::new(0.0, 0.1, 0.05, 0.01).is_err());
        assert!(RiskSpec::new(0.7, 1.0, 0.05, 0.01).is_err());
        assert!(RiskSpec::new(0.7, 0.1, 2.0, 0.01).is_err());
        assert!(RiskSpec::new(0.7, 0.1, 0.05, 0.0).is_err());
    }

    #[test]
    fn threshold_pair_xi_lcb_only_for_scrc_i() {
        ThresholdPair::new(0.2, 0.5, Method::ScrcI, Some(0.6)).unwrap();
        ThresholdPair::new(0.2, 0.5, Method::ScrcT, None).unwrap();
        assert!(ThresholdPair::new(0.2, 0.5, Method::ScrcT, Some(0.6)).is_err());
        assert!(ThresholdPair::new(0.2, 0.5, Method::ScrcI, None).is_err());
        assert!(ThresholdPair::new(1.5, 0.5, Method::CrcAll, None).is_err());
    }

    #[test]
    fn selective_output_text_form() {
        assert_eq!(SelectiveOutput::Abstain.to_string(), "ABSTAIN");
        assert_eq!(SelectiveOutput::set(vec![2, 0, 2]).to_string(), "[1,3]");
        assert_eq!(SelectiveOutput::set(vec![]).to_string(), "[]");
        assert!("[3,1]".parse::<SelectiveOutput>().is_err());
        assert!("[0]".parse::<SelectiveOutput>().is_err());
        assert!("abstain".parse::<SelectiveOutput>().is_err());
        let json = serde_json::to_string(&SelectiveOutput::set(vec![1])).unwrap();
        assert_eq!(json, "\"[2]\"");
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
