//! Dataset loading, standardisation, train/test splits and results persistence.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, BridgeError, Result};

/// Column holding the response in a single-file CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseColumn {
    Name(String),
    /// Zero-based position.
    Index(usize),
}

impl Default for ResponseColumn {
    fn default() -> Self {
        ResponseColumn::Name("y".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub column_names: Vec<String>,
    pub response_name: String,
    /// Original-unit means of the retained columns (zeros when not standardised).
    pub column_means: DVector<f64>,
    /// Original-unit standard deviations of the retained columns (ones when not standardised).
    pub column_sds: DVector<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
    pub standardized: bool,
    /// Positions in the original file of the retained columns.
    pub kept_columns: Vec<usize>,
    /// Names of columns dropped for having zero variance.
    pub dropped_columns: Vec<String>,
}

impl Dataset {
    /// Wraps raw data with an identity transform record.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, column_names: Vec<String>, response_name: String) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(mismatch(format!(
                "X has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if column_names.len() != x.ncols() {
            return Err(mismatch(format!(
                "{} column names for {} columns",
                column_names.len(),
                x.ncols()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(BridgeError::Data("data contain non-finite values".into()));
        }
        let p = x.ncols();
        Ok(Self {
            x,
            y,
            column_names,
            response_name,
            column_means: DVector::zeros(p),
            column_sds: DVector::from_element(p, 1.0),
            y_mean: 0.0,
            y_sd: 1.0,
            standardized: false,
            kept_columns: (0..p).collect(),
            dropped_columns: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn transform(&self) -> Standardization {
        Standardization {
            column_means: self.column_means.as_slice().to_vec(),
            column_sds: self.column_sds.as_slice().to_vec(),
            y_mean: self.y_mean,
            y_sd: self.y_sd,
            kept_columns: self.kept_columns.clone(),
            original_columns: self.kept_columns.iter().copied().max().map_or(0, |m| m + 1),
        }
    }

    /// Rows `idx` of this dataset, keeping the transform record.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(invalid(format!("row index {bad} out of range for n = {}", self.n())));
        }
        Ok(Self {
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            ..self.clone()
        })
    }
}

/// Map between original and standardised units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub column_means: Vec<f64>,
    pub column_sds: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
    /// Positions of the retained columns in the original design.
    pub kept_columns: Vec<usize>,
    /// Smallest original column count compatible with `kept_columns`.
    pub original_columns: usize,
}

impl Standardization {
    /// Selects the retained columns of an original-unit design and standardises them.
    pub fn apply_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() < self.original_columns {
            return Err(mismatch(format!(
                "design has {} columns, the model needs at least {}",
                x.ncols(),
                self.original_columns
            )));
        }
        let mut out = x.select_columns(&self.kept_columns);
        for (c, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.column_means[c]);
            col /= self.column_sds[c];
        }
        Ok(out)
    }

    pub fn apply_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_sd)
    }

    /// Maps standardised predictions back to original units.
    pub fn invert_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| self.y_mean + self.y_sd * v)
    }
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n as f64 - 1.0)).sqrt())
}

/// Centres and scales every column of `X` and `y` to mean 0 and sample sd 1
/// (divisor `n - 1`). Zero-variance columns are dropped and reported. Applying
/// it to already standardised data composes the records, so the operation is idempotent.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let n = ds.n();
    if n < 2 {
        return Err(invalid("standardisation needs at least two observations"));
    }
    let mut keep = Vec::new();
    let mut dropped = ds.dropped_columns.clone();
    let mut stats = Vec::new();
    for c in 0..ds.p() {
        let col = ds.x.column(c);
        let (mean, sd) = sample_sd(col.iter().copied(), n);
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(sd > 1e-12 * scale) {
            dropped.push(ds.column_names[c].clone());
        } else {
            keep.push(c);
            stats.push((mean, sd));
        }
    }
    if keep.is_empty() {
        return Err(BridgeError::Data("every column is constant".into()));
    }
    let (y_mean, y_sd) = sample_sd(ds.y.iter().copied(), n);
    if !(y_sd > 0.0) {
        return Err(BridgeError::Data("the response is constant".into()));
    }
    let mut x = ds.x.select_columns(&keep);
    for (c, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-stats[c].0);
        col /= stats[c].1;
    }
    let p = keep.len();
    let column_means = DVector::from_fn(p, |c, _| ds.column_means[keep[c]] + ds.column_sds[keep[c]] * stats[c].0);
    let column_sds = DVector::from_fn(p, |c, _| ds.column_sds[keep[c]] * stats[c].1);
    Ok(Dataset {
        x,
        y: ds.y.map(|v| (v - y_mean) / y_sd),
        column_names: keep.iter().map(|&c| ds.column_names[c].clone()).collect(),
        response_name: ds.response_name.clone(),
        column_means,
        column_sds,
        y_mean: ds.y_mean + ds.y_sd * y_mean,
        y_sd: ds.y_sd * y_sd,
        standardized: true,
        kept_columns: keep.iter().map(|&c| ds.kept_columns[c]).collect(),
        dropped_columns: dropped,
    })
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| BridgeError::Data(format!("cannot open {}: {e}", path.display())))
}

/// Reads a numeric CSV with a header row. Errors name the 1-based file line and the column.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(BridgeError::Data(format!("{}: missing header row", path.display())));
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(r as u64 + 2, |p| p.line());
        if record.len() != width {
            return Err(BridgeError::Data(format!(
                "{}: line {line} has {} fields, expected {width}",
                path.display(),
                record.len()
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                BridgeError::Data(format!(
                    "{}: line {line}, column '{}' ({}): '{cell}' is not a finite number",
                    path.display(),
                    header[c],
                    c + 1
                ))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(BridgeError::Data(format!("{}: no data rows", path.display())));
    }
    Ok((header, DMatrix::from_row_slice(rows, width, &values)))
}

/// Single CSV with a header and the response in one column.
pub fn load_dataset(path: &Path, response: &ResponseColumn) -> Result<Dataset> {
    let (header, all) = read_numeric_csv(path)?;
    let col = match response {
        ResponseColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| BridgeError::Data(format!("{}: no response column named '{name}'", path.display())))?,
        ResponseColumn::Index(i) => {
            if *i >= header.len() {
                return Err(BridgeError::Data(format!(
                    "{}: response column {i} requested but the file has {} columns",
                    path.display(),
                    header.len()
                )));
            }
            *i
        }
    };
    let others: Vec<usize> = (0..header.len()).filter(|&c| c != col).collect();
    Dataset::new(
        all.select_columns(&others),
        all.column(col).into_owned(),
        others.iter().map(|&c| header[c].clone()).collect(),
        header[col].clone(),
    )
}

/// Two-file layout: a design CSV and a one-column response CSV, both with headers.
pub fn load_xy(x_path: &Path, y_path: &Path) -> Result<Dataset> {
    let (names, x) = read_numeric_csv(x_path)?;
    let (y_names, y) = read_numeric_csv(y_path)?;
    if y.ncols() != 1 {
        return Err(BridgeError::Data(format!(
            "{}: expected one response column, found {}",
            y_path.display(),
            y.ncols()
        )));
    }
    if y.nrows() != x.nrows() {
        return Err(mismatch(format!(
            "{} has {} rows but {} has {}",
            x_path.display(),
            x.nrows(),
            y_path.display(),
            y.nrows()
        )));
    }
    Dataset::new(x, y.column(0).into_owned(), names, y_names[0].clone())
}

/// Writes a matrix with a header; floats use the shortest round-trip representation.
pub fn write_matrix_csv(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    if names.len() != m.ncols() {
        return Err(mismatch("header does not match the matrix width"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `X` and `y` as one CSV, response last.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut names = ds.column_names.clone();
    names.push(ds.response_name.clone());
    let mut all = ds.x.clone().insert_column(ds.p(), 0.0);
    all.set_column(ds.p(), &ds.y);
    write_matrix_csv(path, &names, &all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitScheme {
    /// Training fraction of a single train/test split.
    Fraction(f64),
    /// `k`-fold partition.
    Folds(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub seed: u64,
    pub scheme: SplitScheme,
    pub splits: Vec<Split>,
}

/// Fisher-Yates shuffle drawing `u64` indices, so the permutation does not
/// depend on the platform word size.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        idx.swap(i, j);
    }
    idx
}

pub fn make_splits(n: usize, scheme: SplitScheme, seed: u64) -> Result<SplitPlan> {
    let perm = shuffled_indices(n, seed);
    let splits = match scheme {
        SplitScheme::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid(format!("training fraction must lie in (0, 1), got {f}")));
            }
            let train = (f * n as f64).round() as usize;
            if train == 0 || train == n {
                return Err(invalid(format!("fraction {f} of n = {n} leaves an empty side")));
            }
            let mut train_idx = perm[..train].to_vec();
            let mut test_idx = perm[train..].to_vec();
            train_idx.sort_unstable();
            test_idx.sort_unstable();
            vec![Split { train_idx, test_idx }]
        }
        SplitScheme::Folds(k) => {
            if k < 2 || k > n {
                return Err(invalid(format!("fold count must lie in [2, n = {n}], got {k}")));
            }
            let (base, extra) = (n / k, n % k);
            let mut start = 0;
            let mut folds = Vec::with_capacity(k);
            for f in 0..k {
                let size = base + usize::from(f < extra);
                let mut fold = perm[start..start + size].to_vec();
                fold.sort_unstable();
                folds.push(fold);
                start += size;
            }
            (0..k)
                .map(|f| {
                    let mut train_idx: Vec<usize> = (0..k)
                        .filter(|&g| g != f)
                        .flat_map(|g| folds[g].iter().copied())
                        .collect();
                    train_idx.sort_unstable();
                    Split {
                        train_idx,
                        test_idx: folds[f].clone(),
                    }
                })
                .collect()
        }
    };
    Ok(SplitPlan {
        n,
        seed,
        scheme,
        splits,
    })
}

/// Provenance stored next to every results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub git_commit: Option<String>,
    pub git_dirty: Option<bool>,
    pub unix_time: u64,
    pub command: Vec<String>,
    /// Full configuration of the run.
    pub config: serde_json::Value,
    /// Standardisation convention, for auditing.
    pub sd_convention: String,
}

fn git(args: &[&str]) -> Option<String> {
    let out = std::process::Command::new("git").args(args).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

impl RunMetadata {
    pub fn capture(config: serde_json::Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            git_commit: git(&["rev-parse", "HEAD"]),
            git_dirty: git(&["status", "--porcelain"]).map(|s| !s.is_empty()),
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            command: std::env::args().collect(),
            config,
            sd_convention: "sample standard deviation (divisor n - 1)".into(),
        }
    }
}

/// Path of the JSON sidecar for a results CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes `rows` as CSV (header from the field names) and `meta` to `<path>.json`.
pub fn write_results<T: Serialize>(path: &Path, rows: &[T], meta: &RunMetadata) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut f = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(&mut f, meta)?;
    f.write_all(b"\n")?;
    Ok(())
}
