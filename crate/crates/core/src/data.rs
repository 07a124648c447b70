//! Logit datasets: a synthetic generator, CSV I/O, and seeded splits.
//!
//! CSV layout is one header row `logit_1,...,logit_K,label` followed by one
//! row per example, with 1-based labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrcError};
use crate::types::ScoredExample;

const GENERATE_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const DECOUPLE_STREAM: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Raw model output for one example. `label` is 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub logits: Vec<f64>,
    pub label: usize,
}

/// Gaussian logits around a one-hot signal on the true class.
///
/// A `hardness_mix` fraction of examples get a weakened signal (one fifth of
/// `signal`), which makes them both less confident and more often wrong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub signal: f64,
    pub noise_sd: f64,
    pub hardness_mix: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            n_classes: 10,
            signal: 3.0,
            noise_sd: 1.0,
            hardness_mix: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(ScrcError::InvalidConfig("need at least 2 classes".into()));
        }
        if !(self.signal.is_finite() && self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return Err(ScrcError::InvalidConfig(
                "signal must be finite and noise_sd positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.hardness_mix) {
            return Err(ScrcError::OutOfRange {
                what: "hardness_mix",
                value: self.hardness_mix,
                bounds: "[0, 1]",
            });
        }
        Ok(())
    }
}

pub fn generate(config: &SynthConfig) -> Result<Vec<LogitRecord>> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, GENERATE_STREAM);
    let noise = Normal::new(0.0, config.noise_sd).expect("validated noise_sd");
    let records = (0..config.n_samples)
        .map(|_| {
            let label = rng.random_range(0..config.n_classes);
            let hard = rng.random::<f64>() < config.hardness_mix;
            let boost = if hard { 0.2 * config.signal } else { config.signal };
            let logits = (0..config.n_classes)
                .map(|k| noise.sample(&mut rng) + if k == label { boost } else { 0.0 })
                .collect();
            LogitRecord { logits, label }
        })
        .collect();
    Ok(records)
}

pub fn load_logits(path: impl AsRef<Path>) -> Result<Vec<LogitRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| ScrcError::io(path, e))?;
    read_logits(BufReader::new(file)).map_err(|e| match e {
        ScrcError::Csv { source, .. } => ScrcError::csv(path, source),
        other => other,
    })
}

/// Parses the CSV layout from any reader.
pub fn read_logits(reader: impl Read) -> Result<Vec<LogitRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let width = rdr.headers().map_err(|e| ScrcError::csv("<input>", e))?.len();
    if width < 3 {
        return Err(ScrcError::Parse {
            line: 1,
            message: format!("header has {width} columns; need at least 2 logits and a label"),
        });
    }
    let n_classes = width - 1;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| ScrcError::csv("<input>", e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != width {
            return Err(ScrcError::InconsistentWidth {
                line,
                expected: width,
                found: row.len(),
            });
        }
        let logits = row
            .iter()
            .take(n_classes)
            .map(|s| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(ScrcError::Parse {
                    line,
                    message: format!("`{s}` is not a finite number"),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        let raw = &row[n_classes];
        let label: i64 = raw.parse().map_err(|_| ScrcError::Parse {
            line,
            message: format!("label `{raw}` is not an integer"),
        })?;
        if label < 1 || label > n_classes as i64 {
            return Err(ScrcError::LabelOutOfRange { line, label, n_classes });
        }
        records.push(LogitRecord {
            logits,
            label: (label - 1) as usize,
        });
    }
    Ok(records)
}

pub fn write_logits(path: impl AsRef<Path>, records: &[LogitRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| ScrcError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_logits_to(&mut out, records).map_err(|e| match e {
        ScrcError::Csv { source, .. } => ScrcError::csv(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| ScrcError::io(path, e))
}

pub fn write_logits_to(writer: impl Write, records: &[LogitRecord]) -> Result<()> {
    let k = records.first().map_or(0, |r| r.logits.len());
    if records.iter().any(|r| r.logits.len() != k) {
        return Err(ScrcError::InvalidConfig(
            "records have different numbers of logits".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = (1..=k)
        .map(|i| format!("logit_{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    w.write_record(&header).map_err(|e| ScrcError::csv("<output>", e))?;
    for r in records {
        let row: Vec<String> = r
            .logits
            .iter()
            .map(f64::to_string)
            .chain(std::iter::once((r.label + 1).to_string()))
            .collect();
        w.write_record(&row).map_err(|e| ScrcError::csv("<output>", e))?;
    }
    w.flush().map_err(|e| ScrcError::io("<output>", e))
}

/// Shuffles with `seed` and takes `round(frac_cal * n)` calibration rows and
/// `round(frac_test * n)` test rows. The fractions may sum to less than 1.
pub fn split<T: Clone>(records: &[T], frac_cal: f64, frac_test: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    for (what, f) in [("frac_cal", frac_cal), ("frac_test", frac_test)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(ScrcError::OutOfRange {
                what,
                value: f,
                bounds: "[0, 1]",
            });
        }
    }
    if frac_cal + frac_test > 1.0 + 1e-12 {
        return Err(ScrcError::InvalidConfig(format!(
            "split fractions {frac_cal} + {frac_test} exceed 1"
        )));
    }
    let n = records.len() as f64;
    let n_cal = (frac_cal * n).round() as usize;
    let n_test = ((frac_test * n).round() as usize).min(records.len() - n_cal.min(records.len()));
    split_counts(records, n_cal, n_test, seed)
}

/// Shuffles with `seed` and takes `n_cal` calibration and `n_test` test rows.
pub fn split_counts<T: Clone>(records: &[T], n_cal: usize, n_test: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if n_cal == 0 {
        return Err(ScrcError::EmptySplit("calibration"));
    }
    if n_test == 0 {
        return Err(ScrcError::EmptySplit("test"));
    }
    if n_cal + n_test > records.len() {
        return Err(ScrcError::InvalidConfig(format!(
            "requested {n_cal} calibration + {n_test} test rows from {} records",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<T>>();
    Ok((pick(&order[..n_cal]), pick(&order[n_cal..n_cal + n_test])))
}

/// Replaces each confidence with an independent uniform draw, which breaks
/// any dependence between selection and correctness.
pub fn decouple_confidences(examples: &[ScoredExample], seed: u64) -> Result<Vec<ScoredExample>> {
    let mut rng = stream_rng(seed, DECOUPLE_STREAM);
    examples
        .iter()
        .map(|e| e.with_confidence(rng.random::<f64>()))
        .collect()
}
