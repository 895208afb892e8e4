//! Data model for cellwise weighted and incomplete matrices, plus CSV I/O.
//!
//! A [`WeightedDataset`] pairs an `n x d` matrix of values with an `n x d`
//! matrix of nonnegative cell weights. A weight of zero marks the cell as
//! missing; the value stored there is never read by any estimator.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Token used for missing cells in every CSV format of this crate.
pub const NA_TOKEN: &str = "NA";

/// Relative tolerance used when checking that a covariance matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDataset {
    x: DMatrix<f64>,
    w: DMatrix<f64>,
    row_labels: Option<Vec<String>>,
    column_names: Option<Vec<String>>,
}

impl WeightedDataset {
    /// Validates and wraps a value matrix and a cell-weight matrix.
    ///
    /// Values under a zero weight may be anything (including NaN); they are
    /// replaced by 0 so that downstream arithmetic never sees them.
    pub fn new(mut x: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        if x.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                data_rows: x.nrows(),
                data_cols: x.ncols(),
                weight_rows: w.nrows(),
                weight_cols: w.ncols(),
            });
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Dimension(
                "dataset needs at least one row and one column".into(),
            ));
        }
        let mut any_positive = false;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let wij = w[(i, j)];
                if !wij.is_finite() || wij < 0.0 {
                    return Err(Error::InvalidWeight {
                        row: i,
                        col: j,
                        value: wij,
                    });
                }
                if wij > 0.0 {
                    any_positive = true;
                    if !x[(i, j)].is_finite() {
                        return Err(Error::NonFiniteData { row: i, col: j });
                    }
                } else if !x[(i, j)].is_finite() {
                    x[(i, j)] = 0.0;
                }
            }
        }
        if !any_positive {
            return Err(Error::NoInformation);
        }
        Ok(Self {
            x,
            w,
            row_labels: None,
            column_names: None,
        })
    }

    /// Dataset with every cell weight equal to one.
    pub fn unweighted(x: DMatrix<f64>) -> Result<Self> {
        let w = DMatrix::from_element(x.nrows(), x.ncols(), 1.0);
        Self::new(x, w)
    }

    pub fn from_rows(x: &[Vec<f64>], w: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_matrix(x)?, rows_to_matrix(w)?)
    }

    pub fn with_row_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.nrows() {
            return Err(Error::Dimension(format!(
                "{} row labels for {} rows",
                labels.len(),
                self.nrows()
            )));
        }
        self.row_labels = Some(labels);
        Ok(self)
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.ncols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} columns",
                names.len(),
                self.ncols()
            )));
        }
        self.column_names = Some(names);
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn row_labels(&self) -> Option<&[String]> {
        self.row_labels.as_deref()
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Resolves a column reference given either as a header name or as a
    /// 1-based index.
    pub fn column_index(&self, reference: &str) -> Option<usize> {
        if let Some(names) = &self.column_names {
            if let Some(pos) = names.iter().position(|n| n == reference) {
                return Some(pos);
            }
        }
        reference
            .parse::<usize>()
            .ok()
            .filter(|&k| k >= 1 && k <= self.ncols())
            .map(|k| k - 1)
    }

    /// True when every weight is exactly zero or one.
    pub fn is_zero_one(&self) -> bool {
        self.w.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Copy of the dataset in which every positive weight is replaced by 1.
    pub fn indicator_weights(&self) -> Self {
        let w = self.w.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        Self { w, ..self.clone() }
    }

    /// Copy with all weights multiplied by `factor`.
    pub fn scale_weights(&self, factor: f64) -> Result<Self> {
        let mut out = Self::new(self.x.clone(), &self.w * factor)?;
        out.row_labels = self.row_labels.clone();
        out.column_names = self.column_names.clone();
        Ok(out)
    }

    /// Restricts the dataset to the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.ncols()) {
            return Err(Error::Dimension(format!(
                "column {bad} out of range for {} columns",
                self.ncols()
            )));
        }
        let x = self.x.select_columns(cols);
        let w = self.w.select_columns(cols);
        let mut out = Self::new(x, w)?;
        out.row_labels = self.row_labels.clone();
        out.column_names = self
            .column_names
            .as_ref()
            .map(|names| cols.iter().map(|&c| names[c].clone()).collect());
        Ok(out)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension(format!(
            "ragged rows: expected {d} entries, found {}",
            bad.len()
        )));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// One row of an unpacked dataset. `None` entries are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteRow {
    pub values: Vec<Option<f64>>,
    pub row_weight: f64,
    pub source_index: usize,
    pub level_index: usize,
}

impl IncompleteRow {
    /// Indices of the non-missing coordinates, ascending.
    pub fn observed(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(j, v)| v.map(|_| j))
            .collect()
    }
}

/// Row-weighted incomplete-data matrix produced by unpacking.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpackedDataset {
    rows: Vec<IncompleteRow>,
    d: usize,
}

impl UnpackedDataset {
    /// Checks row widths, positive row weights, at least one observed cell per
    /// row, and strict nesting of observed sets within each source row.
    pub fn new(rows: Vec<IncompleteRow>, d: usize) -> Result<Self> {
        for (r, row) in rows.iter().enumerate() {
            if row.values.len() != d {
                return Err(Error::InvalidUnpacked(format!(
                    "row {r} has {} entries, expected {d}",
                    row.values.len()
                )));
            }
            if !(row.row_weight > 0.0 && row.row_weight.is_finite()) {
                return Err(Error::InvalidUnpacked(format!(
                    "row {r} has non-positive weight {}",
                    row.row_weight
                )));
            }
            if row.values.iter().all(Option::is_none) {
                return Err(Error::InvalidUnpacked(format!(
                    "row {r} is entirely missing"
                )));
            }
            if row.values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidUnpacked(format!(
                    "row {r} has a non-finite value"
                )));
            }
        }
        for pair in rows.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.source_index != b.source_index {
                continue;
            }
            let nested = a
                .values
                .iter()
                .zip(&b.values)
                .all(|(va, vb)| va.is_none() || vb.is_some());
            let grows = b.observed().len() > a.observed().len();
            if !(nested && grows && b.level_index > a.level_index) {
                return Err(Error::InvalidUnpacked(format!(
                    "observed sets of source row {} are not strictly nested",
                    a.source_index
                )));
            }
        }
        Ok(Self { rows, d })
    }

    pub fn rows(&self) -> &[IncompleteRow] {
        &self.rows
    }

    pub fn ncols(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.rows.iter().map(|r| r.row_weight).sum()
    }
}

/// Mean vector and covariance matrix of a Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianParams {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() || sigma.nrows() != mu.len() {
            return Err(Error::Dimension(format!(
                "mean has length {}, covariance is {}x{}",
                mu.len(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        check_symmetric(&sigma, SYMMETRY_TOL)?;
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Marginal parameters of the selected coordinates.
    pub fn select(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.dim()) {
            return Err(Error::Dimension(format!("coordinate {bad} out of range")));
        }
        let mu = DVector::from_iterator(cols.len(), cols.iter().map(|&c| self.mu[c]));
        let sigma = DMatrix::from_fn(cols.len(), cols.len(), |a, b| {
            self.sigma[(cols[a], cols[b])]
        });
        Ok(Self { mu, sigma })
    }

    /// Correlation between coordinates `j` and `k`.
    pub fn correlation(&self, j: usize, k: usize) -> f64 {
        self.sigma[(j, k)] / (self.sigma[(j, j)] * self.sigma[(k, k)]).sqrt()
    }
}

impl Serialize for GaussianParams {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("GaussianParams", 2)?;
        st.serialize_field("mu", self.mu.as_slice())?;
        st.serialize_field("sigma", &matrix_rows(&self.sigma))?;
        st.end()
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Returns an error when `m` is not square or `|m - m^T|` exceeds
/// `rel_tol * max(1, max|m|)`.
pub fn check_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let mut asymmetry = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff.is_nan() {
                return Err(Error::NotSymmetric {
                    asymmetry: f64::NAN,
                });
            }
            asymmetry = asymmetry.max(diff);
        }
    }
    if asymmetry > rel_tol * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Estimator that produced an [`EstimateReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    #[serde(rename = "cwMLE")]
    CwMle,
    #[serde(rename = "cwMean+cwCov")]
    CwMeanCwCov,
    #[serde(rename = "cwMean+sqrtCov")]
    CwMeanSqrtCov,
    #[serde(rename = "unweightedMLE")]
    UnweightedMle,
}

/// Parameter estimates plus fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub method: Method,
    #[serde(flatten)]
    pub params: GaussianParams,
    pub iterations: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    /// PSD status of the raw estimate, before any regularization.
    pub psd: bool,
    pub regularized: bool,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

// ---------------------------------------------------------------------------
// CSV input
// ---------------------------------------------------------------------------

struct RawTable {
    header: Option<Vec<String>>,
    cells: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        records.push(rec.iter().map(str::to_owned).collect::<Vec<_>>());
    }
    if records.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let is_header = records[0]
        .iter()
        .any(|tok| tok != NA_TOKEN && tok.parse::<f64>().is_err());
    let header = if is_header {
        Some(records.remove(0))
    } else {
        None
    };
    if records.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(RawTable {
        header,
        cells: records,
    })
}

fn table_dims(t: &RawTable) -> (usize, usize) {
    (t.cells.len(), t.cells[0].len())
}

/// Loads a data CSV and a weight CSV of the same shape.
///
/// Both files may start with a header row. A data cell may be the token `NA`
/// only where the matching weight is zero; it is stored as 0.
pub fn load_weighted_csv(
    data_path: impl AsRef<Path>,
    weight_path: impl AsRef<Path>,
) -> Result<WeightedDataset> {
    let data_path = data_path.as_ref();
    let weight_path = weight_path.as_ref();
    let data = read_table(data_path)?;
    let weights = read_table(weight_path)?;
    let (n, d) = table_dims(&data);
    let (wn, wd) = table_dims(&weights);
    if (n, d) != (wn, wd) {
        return Err(Error::ShapeMismatch {
            data_rows: n,
            data_cols: d,
            weight_rows: wn,
            weight_cols: wd,
        });
    }

    let mut x = DMatrix::zeros(n, d);
    let mut w = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let wtok = &weights.cells[i][j];
            let wij: f64 = wtok.parse().map_err(|_| Error::Parse {
                path: weight_path.to_path_buf(),
                line: i + 1,
                column: j + 1,
                token: wtok.clone(),
            })?;
            if !wij.is_finite() || wij < 0.0 {
                return Err(Error::InvalidWeight {
                    row: i,
                    col: j,
                    value: wij,
                });
            }
            let xtok = &data.cells[i][j];
            let xij = if xtok == NA_TOKEN {
                f64::NAN
            } else {
                xtok.parse().map_err(|_| Error::Parse {
                    path: data_path.to_path_buf(),
                    line: i + 1,
                    column: j + 1,
                    token: xtok.clone(),
                })?
            };
            w[(i, j)] = wij;
            x[(i, j)] = xij;
        }
    }
    let ds = WeightedDataset::new(x, w)?;
    match data.header.or(weights.header) {
        Some(names) => ds.with_column_names(names),
        None => Ok(ds),
    }
}

// ---------------------------------------------------------------------------
// Unpacked CSV
// ---------------------------------------------------------------------------

fn unpacked_header(d: usize) -> Vec<String> {
    (1..=d)
        .map(|j| format!("c{j}"))
        .chain(["v", "source", "level"].map(String::from))
        .collect()
}

/// Writes an unpacked dataset as CSV with columns `c1..cd, v, source, level`.
///
/// Numbers use Rust's shortest round-trip formatting, so reading the file
/// back reproduces every value bit for bit.
pub fn write_incomplete_csv(u: &UnpackedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_incomplete_to(u, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Same format as [`write_incomplete_csv`], to any writer.
pub fn write_incomplete_to<W: Write + ?Sized>(
    u: &UnpackedDataset,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "{}", unpacked_header(u.ncols()).join(","))?;
    for row in u.rows() {
        let mut fields: Vec<String> = row
            .values
            .iter()
            .map(|v| v.map_or_else(|| NA_TOKEN.to_string(), |x| x.to_string()))
            .collect();
        fields.push(row.row_weight.to_string());
        fields.push(row.source_index.to_string());
        fields.push(row.level_index.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Reads a file written by [`write_incomplete_csv`].
pub fn read_incomplete_csv(path: impl AsRef<Path>) -> Result<UnpackedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.len() < 4 {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let d = header.len() - 3;
    let expected = unpacked_header(d);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: format!("unexpected header, want {}", expected.join(",")),
        });
    }
    let parse_err = |line: usize, column: usize, token: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        token: token.to_string(),
    };
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = r + 2;
        let mut values = Vec::with_capacity(d);
        for j in 0..d {
            let tok = &rec[j];
            values.push(if tok == NA_TOKEN {
                None
            } else {
                Some(
                    tok.parse::<f64>()
                        .map_err(|_| parse_err(line, j + 1, tok))?,
                )
            });
        }
        let row_weight = rec[d]
            .parse::<f64>()
            .map_err(|_| parse_err(line, d + 1, &rec[d]))?;
        let source_index = rec[d + 1]
            .parse::<usize>()
            .map_err(|_| parse_err(line, d + 2, &rec[d + 1]))?;
        let level_index = rec[d + 2]
            .parse::<usize>()
            .map_err(|_| parse_err(line, d + 3, &rec[d + 2]))?;
        rows.push(IncompleteRow {
            values,
            row_weight,
            source_index,
            level_index,
        });
    }
    UnpackedDataset::new(rows, d)
}
