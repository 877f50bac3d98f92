use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for the rank check on the column-normalized design.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A response vector with its design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    column_names: Vec<String>,
}

impl Dataset {
    /// Validates shape, finiteness and full column rank.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::InvalidData(format!(
                "response has {} entries but design has {n} rows",
                y.len()
            )));
        }
        if column_names.len() != p {
            return Err(Error::InvalidData(format!(
                "{} column names for {p} design columns",
                column_names.len()
            )));
        }
        if p == 0 {
            return Err(Error::InvalidData("design matrix has no columns".into()));
        }
        if n < p {
            return Err(Error::InvalidData(format!(
                "need at least as many observations as coefficients (n = {n}, p = {p})"
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("response entry {i} is not finite")));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "design entry (row {}, column `{}`) is not finite",
                k % n,
                column_names[k / n]
            )));
        }
        check_rank(&x, &column_names)?;
        Ok(Self { y, x, column_names })
    }

    /// Skips validation; used for degenerate shapes in unit tests.
    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(
        y: DVector<f64>,
        x: DMatrix<f64>,
        column_names: Vec<String>,
    ) -> Self {
        Self { y, x, column_names }
    }

    /// Builds a dataset from predictor columns, optionally prepending an
    /// intercept column named `intercept`.
    pub fn from_columns(
        y: Vec<f64>,
        columns: Vec<(String, Vec<f64>)>,
        intercept: bool,
    ) -> Result<Self> {
        let n = y.len();
        let mut names = Vec::with_capacity(columns.len() + 1);
        let mut data = Vec::with_capacity(n * (columns.len() + 1));
        if intercept {
            names.push("intercept".to_string());
            data.extend(std::iter::repeat_n(1.0, n));
        }
        for (name, col) in columns {
            if col.len() != n {
                return Err(Error::InvalidData(format!(
                    "column `{name}` has {} entries, expected {n}",
                    col.len()
                )));
            }
            names.push(name);
            data.extend(col);
        }
        let p = names.len();
        Self::new(
            DVector::from_vec(y),
            DMatrix::from_vec(n, p, data),
            names,
        )
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    /// Appends one observation. The caller is responsible for keeping the
    /// design full rank, which appending a row cannot break.
    pub fn push_row(&mut self, y: f64, x: &[f64]) {
        assert_eq!(x.len(), self.n_coef());
        let n = self.n_obs();
        self.y = self.y.clone().insert_row(n, y);
        self.x = self.x.clone().insert_row(n, 0.0);
        for (k, &v) in x.iter().enumerate() {
            self.x[(n, k)] = v;
        }
    }

    /// Least-squares coefficients.
    pub fn least_squares(&self) -> DVector<f64> {
        let qr = self.x.clone().qr();
        let qty = qr.q().transpose() * &self.y;
        qr.r()
            .solve_upper_triangular(&qty)
            .expect("design is full rank by construction")
    }
}

fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut scaled = x.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::RankDeficient {
                column: k,
                name: names[k].clone(),
            });
        }
        col /= norm;
    }
    let r = scaled.qr().r();
    let max_pivot = r.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    for k in 0..r.ncols() {
        if r[(k, k)].abs() <= RANK_TOLERANCE * max_pivot {
            return Err(Error::RankDeficient {
                column: k,
                name: names[k].clone(),
            });
        }
    }
    Ok(())
}
