//! Synchronized and unsynchronized observation containers and CSV ingestion.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{GcmmError, Result};

/// N x D matrix of synchronized observations, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncDataset {
    values: Vec<f64>,
    n: usize,
    d: usize,
    dimension_names: Vec<String>,
}

impl SyncDataset {
    /// Builds a dataset from row-major values, validating shape and finiteness.
    pub fn new(values: Vec<f64>, d: usize, dimension_names: Vec<String>) -> Result<Self> {
        if d == 0 {
            return Err(GcmmError::InvalidData("D >= 1 required".into()));
        }
        if values.len() % d != 0 {
            return Err(GcmmError::InvalidData(format!(
                "{} values do not fill rows of width {d}",
                values.len()
            )));
        }
        if dimension_names.len() != d {
            return Err(GcmmError::InvalidData(format!(
                "{} dimension names for D = {d}",
                dimension_names.len()
            )));
        }
        let n = values.len() / d;
        if n < 2 {
            return Err(GcmmError::InvalidData("N ≥ 2 required".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(GcmmError::NonFinite { row: pos / d + 1, col: pos % d + 1 });
        }
        Ok(Self { values, n, d, dimension_names })
    }

    /// Builds a dataset from rows with generated names `x1..xD`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(GcmmError::Ragged { row: r + 1, found: row.len(), expected: d });
            }
            values.extend_from_slice(row);
        }
        Self::new(values, d, default_names(d))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dimension_names(&self) -> &[String] {
        &self.dimension_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.d..(n + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.d);
        for &n in indices {
            values.extend_from_slice(self.row(n));
        }
        Self::new(values, self.d, self.dimension_names.clone())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&self.dimension_names.join(","));
        out.push('\n');
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

pub(crate) fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| GcmmError::Io { path: path.to_path_buf(), source };
    let mut f = File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Per-dimension pools of observations that have no partner in the other dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnsyncDataset {
    per_dimension: Vec<Vec<f64>>,
}

impl UnsyncDataset {
    pub fn new(per_dimension: Vec<Vec<f64>>) -> Result<Self> {
        for (i, pool) in per_dimension.iter().enumerate() {
            if let Some(pos) = pool.iter().position(|v| !v.is_finite()) {
                return Err(GcmmError::NonFinite { row: pos + 1, col: i + 1 });
            }
        }
        Ok(Self { per_dimension })
    }

    /// D empty pools.
    pub fn empty(d: usize) -> Self {
        Self { per_dimension: vec![Vec::new(); d] }
    }

    pub fn d(&self) -> usize {
        self.per_dimension.len()
    }

    pub fn pool(&self, i: usize) -> &[f64] {
        &self.per_dimension[i]
    }

    pub fn pools(&self) -> &[Vec<f64>] {
        &self.per_dimension
    }

    pub fn total_len(&self) -> usize {
        self.per_dimension.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Checks the pool count against the synchronized data it accompanies.
    pub fn check_matches(&self, data: &SyncDataset) -> Result<()> {
        if self.d() != data.d() {
            return Err(GcmmError::InvalidData(format!(
                "unsynchronized data has {} dimensions, synchronized data has {}",
                self.d(),
                data.d()
            )));
        }
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> GcmmError {
    GcmmError::Csv { path: path.to_path_buf(), message: e.to_string() }
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| GcmmError::Parse {
        row,
        col,
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(GcmmError::NonFinite { row, col });
    }
    Ok(v)
}

/// Reads a comma-separated file with one header row of dimension names.
/// Rows and columns in errors are 1-based and count body rows only.
pub fn load_sync_csv(path: &Path) -> Result<SyncDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let d = names.len();
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != d {
            return Err(GcmmError::Ragged { row: r + 1, found: record.len(), expected: d });
        }
        for (c, cell) in record.iter().enumerate() {
            values.push(parse_cell(cell, r + 1, c + 1)?);
        }
    }
    SyncDataset::new(values, d, names)
}

/// Reads a single-column file with one header row.
pub fn load_unsync_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != 1 {
            return Err(GcmmError::Ragged { row: r + 1, found: record.len(), expected: 1 });
        }
        values.push(parse_cell(&record[0], r + 1, 1)?);
    }
    Ok(values)
}

/// Loads `<dir>/<dimension name>.csv` for every dimension of `data`;
/// a missing file means an empty pool.
pub fn load_unsync_dir(dir: &Path, data: &SyncDataset) -> Result<UnsyncDataset> {
    let mut pools = Vec::with_capacity(data.d());
    for name in data.dimension_names() {
        let path = dir.join(format!("{name}.csv"));
        pools.push(if path.exists() { load_unsync_csv(&path)? } else { Vec::new() });
    }
    UnsyncDataset::new(pools)
}
