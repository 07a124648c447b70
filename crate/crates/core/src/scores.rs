//! Class probabilities and selection scores derived from raw logits.
//!
//! All four selection scores are mapped into `[0, 1]` with higher meaning more
//! confident. Selection only looks at the ordering of `g`, so the monotone
//! normalizations applied to entropy and energy do not change which inputs a
//! threshold accepts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrcError};
use crate::types::ScoredExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreTag {
    Msp,
    Margin,
    Entropy,
    Energy,
}

impl ScoreTag {
    pub const ALL: [ScoreTag; 4] = [ScoreTag::Msp, ScoreTag::Margin, ScoreTag::Entropy, ScoreTag::Energy];

    pub fn name(self) -> &'static str {
        match self {
            ScoreTag::Msp => "msp",
            ScoreTag::Margin => "margin",
            ScoreTag::Entropy => "entropy",
            ScoreTag::Energy => "energy",
        }
    }
}

impl fmt::Display for ScoreTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreTag {
    type Err = ScrcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(ScoreTag::Msp),
            "margin" => Ok(ScoreTag::Margin),
            "entropy" => Ok(ScoreTag::Entropy),
            "energy" => Ok(ScoreTag::Energy),
            other => Err(ScrcError::InvalidConfig(format!("unknown score `{other}`"))),
        }
    }
}

/// Which selection score to use, and the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreKind {
    pub tag: ScoreTag,
    pub temperature: f64,
}

impl ScoreKind {
    pub fn new(tag: ScoreTag, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ScrcError::OutOfRange {
                what: "temperature",
                value: temperature,
                bounds: "(0, inf)",
            });
        }
        Ok(Self { tag, temperature })
    }
}

impl Default for ScoreKind {
    fn default() -> Self {
        Self {
            tag: ScoreTag::Margin,
            temperature: 1.0,
        }
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(ScrcError::InvalidConfig(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(ScrcError::NonFinite("logits"));
    }
    Ok(())
}

fn log_sum_exp_scaled(logits: &[f64], temperature: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let s: f64 = logits.iter().map(|l| (l / temperature - max).exp()).sum();
    max + s.ln()
}

/// `softmax(logits / T)`, computed with max-subtraction.
pub fn temperature_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_logits(logits)?;
    ScoreKind::new(ScoreTag::Msp, temperature)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

pub fn msp(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(0.0, f64::max)
}

/// Gap between the two largest probabilities.
pub fn margin(probs: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (first - second).clamp(0.0, 1.0)
}

/// `1 - H(p) / ln K`, with `0 ln 0 = 0`.
pub fn entropy_confidence(probs: &[f64]) -> f64 {
    let k = probs.len();
    if k < 2 {
        return 1.0;
    }
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (1.0 - h / (k as f64).ln()).clamp(0.0, 1.0)
}

/// Raw energy `-T ln sum_k exp(logit_k / T)`; lower is more confident.
pub fn energy(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits)?;
    ScoreKind::new(ScoreTag::Energy, temperature)?;
    Ok(-temperature * log_sum_exp_scaled(logits, temperature))
}

/// Min-max rescaling of negated energy, fitted on calibration logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyScaler {
    temperature: f64,
    min_neg_energy: f64,
    max_neg_energy: f64,
}

impl EnergyScaler {
    pub fn fit<'a>(calib_logits: impl IntoIterator<Item = &'a [f64]>, temperature: f64) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut any = false;
        for l in calib_logits {
            let neg = -energy(l, temperature)?;
            lo = lo.min(neg);
            hi = hi.max(neg);
            any = true;
        }
        if !any {
            return Err(ScrcError::InvalidConfig(
                "energy score needs a non-empty calibration collection".into(),
            ));
        }
        let scaler = Self {
            temperature,
            min_neg_energy: lo,
            max_neg_energy: hi,
        };
        if scaler.is_degenerate() {
            log::warn!("all calibration energies are equal; energy confidence is constant 0.5");
        }
        Ok(scaler)
    }

    /// All calibration energies were equal; every score maps to 0.5.
    pub fn is_degenerate(&self) -> bool {
        self.max_neg_energy <= self.min_neg_energy
    }

    pub fn confidence(&self, logits: &[f64]) -> Result<f64> {
        let neg = -energy(logits, self.temperature)?;
        if self.is_degenerate() {
            return Ok(0.5);
        }
        Ok(((neg - self.min_neg_energy) / (self.max_neg_energy - self.min_neg_energy)).clamp(0.0, 1.0))
    }
}

/// `energy_confidence` as a one-shot call; refits the scaler each time.
pub fn energy_confidence<'a>(
    logits: &[f64],
    temperature: f64,
    calib_logits: impl IntoIterator<Item = &'a [f64]>,
) -> Result<f64> {
    EnergyScaler::fit(calib_logits, temperature)?.confidence(logits)
}

/// Turns raw logits into [`ScoredExample`]s for a fixed score kind.
///
/// Energy needs a reference range, which comes from the calibration split
/// passed to [`Scorer::fit`]; the other scores ignore it.
#[derive(Debug, Clone)]
pub struct Scorer {
    kind: ScoreKind,
    energy: Option<EnergyScaler>,
}

impl Scorer {
    pub fn fit<'a>(kind: ScoreKind, calib_logits: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let energy = match kind.tag {
            ScoreTag::Energy => Some(EnergyScaler::fit(calib_logits, kind.temperature)?),
            _ => None,
        };
        Ok(Self { kind, energy })
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn score(&self, logits: &[f64], label: Option<usize>) -> Result<ScoredExample> {
        let probs = temperature_softmax(logits, self.kind.temperature)?;
        let g = match (self.kind.tag, &self.energy) {
            (ScoreTag::Msp, _) => msp(&probs),
            (ScoreTag::Margin, _) => margin(&probs),
            (ScoreTag::Entropy, _) => entropy_confidence(&probs),
            (ScoreTag::Energy, Some(scaler)) => scaler.confidence(logits)?,
            (ScoreTag::Energy, None) => unreachable!("energy scorer is always fitted"),
        };
        ScoredExample::new(probs, g, label, Some(logits.to_vec()))
    }
}
