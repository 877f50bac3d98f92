//! Dataset ingestion and CSV/JSON output helpers.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Reads a comma-separated file with a header row. `response` names the
/// response column; every other column becomes a predictor, in file order,
/// after an optional leading `intercept` column.
pub fn load_csv(path: &Path, response: &str, intercept: bool) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::InvalidData(format!("{}: file is empty", path.display())));
    }
    let response_col = headers.iter().position(|h| h == response).ok_or_else(|| {
        Error::InvalidData(format!(
            "{}: response column `{response}` not found (columns: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        for (k, cell) in record.iter().enumerate() {
            let value = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::NonNumericCell {
                    path: path.to_path_buf(),
                    row: row + 1,
                    column: headers[k].to_string(),
                    value: cell.to_string(),
                }
            })?;
            columns[k].push(value);
        }
    }
    let n = columns[response_col].len();
    if n == 0 {
        return Err(Error::InvalidData(format!(
            "{}: no data rows (n = 0)",
            path.display()
        )));
    }
    let y = std::mem::take(&mut columns[response_col]);
    let predictors = headers
        .iter()
        .zip(columns)
        .enumerate()
        .filter(|(k, _)| *k != response_col)
        .map(|(_, (name, col))| (name.to_string(), col))
        .collect();
    Dataset::from_columns(y, predictors, intercept)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-5..1e16).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Label used in per-quantile file names, e.g. `outliers_tau=0.5.csv`.
pub fn tau_file_name(prefix: &str, tau: f64) -> String {
    format!("{prefix}_tau={}.csv", fmt_num(tau))
}

/// Collects rows in memory and writes them in one go.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(text.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Creates `dir` if needed and checks that files can be created in it.
pub fn prepare_output_dir(dir: &Path) -> Result<PathBuf> {
    let io_err = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let probe = dir.join(".bqr-write-probe");
    File::create(&probe).map_err(io_err)?;
    std::fs::remove_file(&probe).map_err(io_err)?;
    Ok(dir.to_path_buf())
}
