use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SweepVariable;
use crate::error::{Result, ScrcError};
use crate::numeric::mean_and_se;
use crate::types::Method;

/// One (method, sweep value, trial) outcome. Column order is the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub method: Method,
    pub sweep_variable: SweepVariable,
    pub sweep_value: String,
    pub trial: usize,
    pub n_selected: Option<usize>,
    pub selective_coverage: Option<f64>,
    pub selective_risk: Option<f64>,
    pub set_size_selected: Option<f64>,
    pub set_size_rejected: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub feasible: bool,
}

/// Mean and standard error of each metric over the trials of one
/// (method, sweep value) cell. Means skip trials where the metric is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub sweep_variable: SweepVariable,
    pub sweep_value: String,
    pub n_trials: usize,
    pub n_feasible: usize,
    pub coverage_mean: Option<f64>,
    pub coverage_se: Option<f64>,
    pub risk_mean: Option<f64>,
    pub risk_se: Option<f64>,
    pub risk_n: usize,
    pub set_size_selected_mean: Option<f64>,
    pub set_size_selected_se: Option<f64>,
    pub set_size_rejected_mean: Option<f64>,
    pub set_size_rejected_se: Option<f64>,
    pub lambda1_mean: Option<f64>,
    pub lambda2_mean: Option<f64>,
}

fn summarize(values: Vec<f64>) -> (Option<f64>, Option<f64>) {
    match mean_and_se(&values) {
        Some((m, se)) => (Some(m), Some(se)),
        None => (None, None),
    }
}

/// Groups rows by (method, sweep value) in first-appearance order.
pub fn aggregate(rows: &[TrialRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Method, &str)> = Vec::new();
    for r in rows {
        let key = (r.method, r.sweep_value.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, value)| {
            let cell: Vec<&TrialRow> = rows
                .iter()
                .filter(|r| r.method == method && r.sweep_value == value)
                .collect();
            let col = |f: fn(&TrialRow) -> Option<f64>| -> Vec<f64> { cell.iter().filter_map(|r| f(r)).collect() };
            let (coverage_mean, coverage_se) = summarize(col(|r| r.selective_coverage));
            let risks = col(|r| r.selective_risk);
            let risk_n = risks.len();
            let (risk_mean, risk_se) = summarize(risks);
            let (set_size_selected_mean, set_size_selected_se) = summarize(col(|r| r.set_size_selected));
            let (set_size_rejected_mean, set_size_rejected_se) = summarize(col(|r| r.set_size_rejected));
            AggregateRow {
                method,
                sweep_variable: cell[0].sweep_variable,
                sweep_value: value.to_string(),
                n_trials: cell.len(),
                n_feasible: cell.iter().filter(|r| r.feasible).count(),
                coverage_mean,
                coverage_se,
                risk_mean,
                risk_se,
                risk_n,
                set_size_selected_mean,
                set_size_selected_se,
                set_size_rejected_mean,
                set_size_rejected_se,
                lambda1_mean: summarize(col(|r| r.lambda1)).0,
                lambda2_mean: summarize(col(|r| r.lambda2)).0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = ScrcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(ScrcError::InvalidConfig(format!("unknown format `{other}`"))),
        }
    }
}

/// `runs/xi.csv` becomes `runs/xi_agg.csv`.
pub fn aggregate_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_agg.{}", ext.to_string_lossy()),
        None => format!("{stem}_agg"),
    };
    path.with_file_name(name)
}

/// Serializes `rows` as CSV. The csv writer only derives a header from the
/// first row, so an empty table gets `header` written explicitly.
pub fn write_csv_to<T: Serialize>(
    writer: impl Write,
    rows: &[T],
    header: &[&str],
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_writer(writer);
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRIAL_COLUMNS: [&str; 12] = [
    "method",
    "sweep_variable",
    "sweep_value",
    "trial",
    "n_selected",
    "selective_coverage",
    "selective_risk",
    "set_size_selected",
    "set_size_rejected",
    "lambda1",
    "lambda2",
    "feasible",
];

pub const AGGREGATE_COLUMNS: [&str; 16] = [
    "method",
    "sweep_variable",
    "sweep_value",
    "n_trials",
    "n_feasible",
    "coverage_mean",
    "coverage_se",
    "risk_mean",
    "risk_se",
    "risk_n",
    "set_size_selected_mean",
    "set_size_selected_se",
    "set_size_rejected_mean",
    "set_size_rejected_se",
    "lambda1_mean",
    "lambda2_mean",
];

fn write_file<T: Serialize>(path: &Path, rows: &[T], header: &[&str], format: OutputFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| ScrcError::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        OutputFormat::Csv => write_csv_to(&mut out, rows, header).map_err(|e| ScrcError::csv(path, e))?,
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, rows).map_err(|source| ScrcError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            out.write_all(b"\n").map_err(|e| ScrcError::io(path, e))?;
        }
    }
    out.flush().map_err(|e| ScrcError::io(path, e))
}

/// Writes trial rows to `path` and their aggregates next to it.
pub fn emit(rows: &[TrialRow], format: OutputFormat, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    write_file(path, rows, &TRIAL_COLUMNS, format)?;
    let agg_path = aggregate_path(path);
    write_file(&agg_path, &aggregate(rows), &AGGREGATE_COLUMNS, format)?;
    Ok(agg_path)
}

fn read_file<T: for<'de> Deserialize<'de>>(path: &Path, format: OutputFormat) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| ScrcError::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        OutputFormat::Csv => csv::Reader::from_reader(reader)
            .deserialize()
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| ScrcError::csv(path, e)),
        OutputFormat::Json => serde_json::from_reader(reader).map_err(|source| ScrcError::Json {
            path: path.to_path_buf(),
            source,
        }),
    }
}

pub fn read_trials(path: impl AsRef<Path>, format: OutputFormat) -> Result<Vec<TrialRow>> {
    read_file(path.as_ref(), format)
}

pub fn read_aggregates(path: impl AsRef<Path>, format: OutputFormat) -> Result<Vec<AggregateRow>> {
    read_file(path.as_ref(), format)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, value: &str, trial: usize, risk: Option<f64>) -> TrialRow {
        TrialRow {
            method,
            sweep_variable: SweepVariable::Xi,
            sweep_value: value.into(),
            trial,
            n_selected: Some(10),
            selective_coverage: Some(0.7 + 0.01 * trial as f64),
            selective_risk: risk,
            set_size_selected: Some(1.5),
            set_size_rejected: None,
            lambda1: Some(0.3),
            lambda2: Some(0.6),
            feasible: true,
        }
    }

    #[test]
    fn aggregate_path_inserts_suffix() {
        assert_eq!(aggregate_path(Path::new("out/xi.csv")), Path::new("out/xi_agg.csv"));
        assert_eq!(aggregate_path(Path::new("res")), Path::new("res_agg"));
    }

    #[test]
    fn aggregates_skip_absent_values() {
        let rows = vec![
            row(Method::ScrcT, "0.7", 0, Some(0.1)),
            row(Method::ScrcT, "0.7", 1, None),
            row(Method::ScrcT, "0.7", 2, Some(0.2)),
        ];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].n_trials, 3);
        assert_eq!(agg[0].risk_n, 2);
        assert!((agg[0].risk_mean.unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(agg[0].set_size_rejected_mean, None);
    }

    #[test]
    fn empty_result_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit(&[], OutputFormat::Csv, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{}\n", TRIAL_COLUMNS.join(",")));
        let agg = std::fs::read_to_string(dir.path().join("empty_agg.csv")).unwrap();
        assert_eq!(agg, format!("{}\n", AGGREGATE_COLUMNS.join(",")));
    }

    #[test]
    fn round_trip_reproduces_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (0..7)
            .flat_map(|t| {
                [
                    row(Method::ScrcT, "0.6", t, Some(0.1 / (t as f64 + 3.0))),
                    row(Method::Rand, "0.6", t, None),
                ]
            })
            .collect();
        for format in [OutputFormat::Csv, OutputFormat::Json] {
            let path = dir.path().join(format!("rows.{format:?}"));
            let agg_path = emit(&rows, format, &path).unwrap();
            let back = read_trials(&path, format).unwrap();
            assert_eq!(back, rows);
            assert_eq!(aggregate(&back), read_aggregates(&agg_path, format).unwrap());
        }
    }

    #[test]
    fn csv_header_matches_schema() {
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &[row(Method::CrcAll, "0.8", 0, None)], &TRIAL_COLUMNS).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRIAL_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "CRC-ALL,xi,0.8,0,10,0.7,,1.5,,0.3,0.6,true");
    }
}
