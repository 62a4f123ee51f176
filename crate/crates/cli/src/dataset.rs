//! CSV ingestion, shuffled train/validation/test split and z-scoring.

use std::path::{Path, PathBuf};

use prerank::numerics::RngStream;
use prerank::training::RegressionData;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SPLIT_STREAM_TAG: u64 = 0x7370_6c74;
const MIN_ROWS: usize = 10;
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("file is empty")]
    EmptyFile,
    #[error("line {line}: expected a header row, found numeric values")]
    NoHeader { line: u64 },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("line {row}, column {col:?}: value {value:?} is not a finite number")]
    NonNumericCell { row: u64, col: String, value: String },
    #[error("need at least {MIN_ROWS} data rows, found {0}")]
    TooFewRows(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// Where the data lives and how to cut it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub path: PathBuf,
    pub targets: Vec<String>,
    /// Feature columns; every non-target column when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

/// Per-column affine map fitted on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    /// Standardized features, file order.
    pub x: Vec<Vec<f64>>,
    /// Standardized targets, file order.
    pub y: Vec<Vec<f64>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub standardization: Standardization,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn indices(&self, split: SplitName) -> &[usize] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split(&self, split: SplitName) -> RegressionData {
        let idx = self.indices(split);
        RegressionData {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i].clone()).collect(),
        }
    }
}

/// Split sizes for `n` rows; validation and test are rounded, train takes the rest.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<(usize, usize, usize), DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidSplit(format!(
            "fractions {fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let val = (fractions[1] * n as f64).round() as usize;
    let test = (fractions[2] * n as f64).round() as usize;
    if val + test > n {
        return Err(DataError::InvalidSplit(format!("{n} rows cannot hold the requested split")));
    }
    Ok((n - val - test, val, test))
}

fn parse_cell(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn column_stats(rows: &[usize], values: &[Vec<f64>], col: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&r| values[r][col]).sum::<f64>() / n;
    let var = rows.iter().map(|&r| (values[r][col] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn standardize(
    values: &mut [Vec<f64>],
    names: &[String],
    train: &[usize],
    warnings: &mut Vec<String>,
) -> (Vec<f64>, Vec<f64>) {
    let cols = names.len();
    let mut means = Vec::with_capacity(cols);
    let mut stds = Vec::with_capacity(cols);
    for c in 0..cols {
        let (mean, mut std) = column_stats(train, values, c);
        if !(std > MIN_STD) {
            warnings.push(format!("column {:?} is constant on the training split; scale set to 1", names[c]));
            std = 1.0;
        }
        means.push(mean);
        stds.push(std);
    }
    for row in values.iter_mut() {
        for c in 0..cols {
            row[c] = (row[c] - means[c]) / stds[c];
        }
    }
    (means, stds)
}

/// Reads `spec.path`, shuffles rows with `seed`, splits them and z-scores
/// every column with statistics of the training rows.
pub fn load_dataset(spec: &DataSpec, seed: u64) -> Result<Dataset, DataError> {
    let io_err = |e: &dyn std::fmt::Display| DataError::Io {
        path: spec.path.clone(),
        message: e.to_string(),
    };
    let text = std::fs::read_to_string(&spec.path).map_err(|e| io_err(&e))?;
    parse_dataset(&text, spec, seed)
}

/// [`load_dataset`] on in-memory CSV text.
pub fn parse_dataset(text: &str, spec: &DataSpec, seed: u64) -> Result<Dataset, DataError> {
    if text.trim().is_empty() {
        return Err(DataError::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(DataError::Malformed {
                line: 1,
                message: e.to_string(),
            })
        }
        None => return Err(DataError::EmptyFile),
    };
    let header_line = header.position().map_or(1, |p| p.line());
    if header.iter().all(|h| parse_cell(h).is_some()) {
        return Err(DataError::NoHeader { line: header_line });
    }
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    let find = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let target_idx = spec.targets.iter().map(|t| find(t)).collect::<Result<Vec<_>, _>>()?;
    let feature_names: Vec<String> = match &spec.features {
        Some(f) => f.clone(),
        None => names.iter().filter(|n| !spec.targets.contains(n)).cloned().collect(),
    };
    let feature_idx = feature_names.iter().map(|f| find(f)).collect::<Result<Vec<_>, _>>()?;
    if spec.targets.is_empty() {
        return Err(DataError::MissingColumn("<no target columns configured>".into()));
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    for record in records {
        let record = record.map_err(|e| DataError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |c: usize| -> Result<f64, DataError> {
            let raw = record.get(c).unwrap_or("");
            parse_cell(raw).ok_or_else(|| DataError::NonNumericCell {
                row: line,
                col: names[c].clone(),
                value: raw.to_string(),
            })
        };
        x.push(feature_idx.iter().map(|&c| cell(c)).collect::<Result<Vec<_>, _>>()?);
        y.push(target_idx.iter().map(|&c| cell(c)).collect::<Result<Vec<_>, _>>()?);
    }
    let n = x.len();
    if n < MIN_ROWS {
        return Err(DataError::TooFewRows(n));
    }
    let (n_train, n_val, _) = split_sizes(n, spec.split)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::derive(seed, &[SPLIT_STREAM_TAG]));
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    if train.is_empty() {
        return Err(DataError::InvalidSplit("training split is empty".into()));
    }

    let mut warnings = Vec::new();
    let (feature_mean, feature_std) = standardize(&mut x, &feature_names, &train, &mut warnings);
    let (target_mean, target_std) = standardize(&mut y, &spec.targets, &train, &mut warnings);
    Ok(Dataset {
        feature_names,
        target_names: spec.targets.clone(),
        x,
        y,
        train,
        val,
        test,
        standardization: Standardization {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        },
        warnings,
    })
}

/// Resolves a relative data path against the directory of the config file.
pub fn resolve_path(base: Option<&Path>, path: &Path) -> PathBuf {
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(targets: &[&str]) -> DataSpec {
        DataSpec {
            path: PathBuf::from("inline.csv"),
            targets: targets.iter().map(|s| s.to_string()).collect(),
            features: None,
            split: default_split(),
        }
    }

    fn csv_text(rows: usize) -> String {
        let mut s = String::from("a,b,c,t1,t2\n");
        for i in 0..rows {
            let v = i as f64;
            s.push_str(&format!("{},{},3.5,{},{}\n", v, v * v, 2.0 * v + 1.0, (v * 0.7).sin()));
        }
        s
    }

    #[test]
    fn split_of_hundred_rows() {
        let d = parse_dataset(&csv_text(100), &spec(&["t1", "t2"]), 3).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = d.train.iter().chain(&d.val).chain(&d.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let d = parse_dataset(&csv_text(30), &spec(&["t1", "t2"]), 1).unwrap();
        assert_eq!(d.feature_names, vec!["a", "b", "c"]);
        assert_eq!(d.standardization.feature_std[2], 1.0);
        assert!(d.x.iter().all(|r| r[2] == 0.0));
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn train_split_is_standardized() {
        let d = parse_dataset(&csv_text(57), &spec(&["t1", "t2"]), 9).unwrap();
        let train = d.split(SplitName::Train);
        for c in 0..2 {
            let n = train.y.len() as f64;
            let mean = train.y.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = train.y.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn same_seed_same_split() {
        let a = parse_dataset(&csv_text(40), &spec(&["t1"]), 5).unwrap();
        let b = parse_dataset(&csv_text(40), &spec(&["t1"]), 5).unwrap();
        let c = parse_dataset(&csv_text(40), &spec(&["t1"]), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_dataset("", &spec(&["t1"]), 0), Err(DataError::EmptyFile)));
        assert!(matches!(
            parse_dataset("1,2\n3,4\n", &spec(&["t1"]), 0),
            Err(DataError::NoHeader { line: 1 })
        ));
        assert!(matches!(
            parse_dataset(&csv_text(20), &spec(&["zz"]), 0),
            Err(DataError::MissingColumn(c)) if c == "zz"
        ));
        let mut bad = csv_text(20);
        bad.push_str("1,x,3,4,5\n");
        assert!(matches!(
            parse_dataset(&bad, &spec(&["t1"]), 0),
            Err(DataError::NonNumericCell { row: 22, ref col, .. }) if col == "b"
        ));
        assert!(matches!(parse_dataset(&csv_text(5), &spec(&["t1"]), 0), Err(DataError::TooFewRows(5))));
    }

    #[test]
    fn split_validation() {
        assert!(split_sizes(10, [0.5, 0.5, 0.5]).is_err());
        assert_eq!(split_sizes(10, [1.0, 0.0, 0.0]).unwrap(), (10, 0, 0));
    }
}
