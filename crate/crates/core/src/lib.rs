//! Two-stage selective conformal risk control.
//!
//! Stage one accepts an input when its selection score `g(x)` clears
//! `1 - lambda1`, calibrated so that a target fraction `xi` of inputs is
//! accepted. Stage two returns the prediction set
//! `{k : f(x)_k >= 1 - lambda2}` on accepted inputs, with `lambda2` calibrated
//! on the accepted calibration points so that the expected loss conditional on
//! acceptance is at most `alpha`.
//!
//! ```
//! use scrc_core::{apply, crc_all_calibrate, LossKind, PipelineConfig, RiskSpec, ScoredExample};
//!
//! let cal: Vec<ScoredExample> = (0..40)
//!     .map(|i| {
//!         let p = 0.5 + 0.01 * i as f64;
//!         ScoredExample::new(vec![p, 1.0 - p], p, Some(usize::from(i % 5 == 0)), None).unwrap()
//!     })
//!     .collect();
//! let config = PipelineConfig::new(RiskSpec::with_targets(0.7, 0.2).unwrap(), LossKind::Miscoverage);
//! let outcome = crc_all_calibrate(&cal, &config).unwrap();
//! let out = apply(&outcome.thresholds, &cal[0]);
//! assert!(!out.is_abstain());
//! ```

pub mod data;
pub mod error;
pub mod harness;
mod numeric;
pub mod pipeline;
pub mod scores;
pub mod sets;
pub mod stage1;
pub mod stage2;
pub mod types;

pub use error::{Result, ScrcError};
pub use pipeline::{
    apply, apply_with_confidence, crc_all_calibrate, rand_calibrate, scrc_i_calibrate, scrc_t_calibrate,
    CalibrationOutcome, GridPoint, Objective, PipelineConfig, TransductiveCalibrator,
};
pub use scores::{ScoreKind, ScoreTag, Scorer};
pub use sets::{prediction_set, LossKind};
pub use types::{Method, RiskSpec, ScoredExample, SelectiveOutput, ThresholdPair, TrialMetrics};
