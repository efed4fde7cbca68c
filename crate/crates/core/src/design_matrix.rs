//! Covariate designs under the centering/whitening normalization
//! `1ᵀX = 0`, `XᵀX = n·I`, plus the Gram and leverage primitives the
//! rest of the crate is built on.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::format_float;

/// Smallest-to-largest eigenvalue ratio below which the centered
/// covariance is declared rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Covariates before normalization, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCovariates {
    values: DMatrix<f64>,
}

impl RawCovariates {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Dimension("need at least one unit".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("ragged covariate rows".into()));
        }
        Self::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Deviation of a matrix from the design normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationCheck {
    /// `max_j |Σ_i X_ij|`
    pub max_column_sum: f64,
    /// `max_jk |(XᵀX)_jk / n − δ_jk|`
    pub max_gram_deviation: f64,
}

impl NormalizationCheck {
    pub fn of(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let max_column_sum = x
            .column_iter()
            .map(|c| c.sum().abs())
            .fold(0.0, f64::max);
        let xtx = x.transpose() * x;
        let mut max_gram_deviation: f64 = 0.0;
        for j in 0..xtx.nrows() {
            for k in 0..xtx.ncols() {
                let target = if j == k { 1.0 } else { 0.0 };
                max_gram_deviation = max_gram_deviation.max((xtx[(j, k)] / n - target).abs());
            }
        }
        Self {
            max_column_sum,
            max_gram_deviation,
        }
    }

    /// Column sums within `1e-10·n`, Gram within `1e-8` relative.
    pub fn passes(&self, n: usize) -> bool {
        self.max_column_sum <= 1e-10 * n as f64 && self.max_gram_deviation <= 1e-8
    }
}

/// A covariate matrix with centered columns and `XᵀX = n·I_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDesign {
    x: DMatrix<f64>,
}

impl NormalizedDesign {
    /// Wraps a matrix that already satisfies the normalization, checking it.
    pub fn from_normalized(x: DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Dimension("need at least one unit".into()));
        }
        if x.ncols() + 1 > n {
            return Err(Error::Dimension(format!(
                "p = {} exceeds n - 1 = {}",
                x.ncols(),
                n - 1
            )));
        }
        let check = NormalizationCheck::of(&x);
        if !check.passes(n) {
            return Err(Error::InvalidInput(format!(
                "matrix is not normalized (column sum {:e}, gram deviation {:e})",
                check.max_column_sum, check.max_gram_deviation
            )));
        }
        Ok(Self { x })
    }

    /// Skips the invariant check. Only for degenerate test fixtures
    /// (e.g. `n = 1`) where the normalization cannot hold.
    #[doc(hidden)]
    pub fn new_unchecked(x: DMatrix<f64>) -> Self {
        Self { x }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    /// `G = XXᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.x * self.x.transpose()
    }

    /// `‖x_i‖²` for every unit.
    pub fn row_norms_sq(&self) -> Vec<f64> {
        self.x.row_iter().map(|r| r.norm_squared()).collect()
    }

    pub fn check(&self) -> NormalizationCheck {
        NormalizationCheck::of(&self.x)
    }

    /// Keeps the first `p` columns (the result is still normalized).
    pub fn leading_columns(&self, p: usize) -> NormalizedDesign {
        Self {
            x: self.x.columns(0, p.min(self.p())).into_owned(),
        }
    }
}

/// Centers every column and applies symmetric (ZCA) whitening so that
/// `XᵀX = n·I`.
pub fn normalize(raw: &RawCovariates) -> Result<NormalizedDesign> {
    let n = raw.n();
    let p = raw.p();
    if p + 1 > n {
        return Err(Error::Dimension(format!(
            "p = {p} exceeds n - 1 = {}",
            n.saturating_sub(1)
        )));
    }
    let values = raw.values();
    if p == 0 {
        return Ok(NormalizedDesign {
            x: DMatrix::zeros(n, 0),
        });
    }

    let already = NormalizationCheck::of(values);
    if already.max_column_sum <= 1e-12 * n as f64 && already.max_gram_deviation <= 1e-12 {
        return Ok(NormalizedDesign { x: values.clone() });
    }

    let mut centered = values.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = (centered.transpose() * &centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let largest = eig.eigenvalues.max();
    let smallest = eig.eigenvalues.min();
    if !(largest > 0.0) || smallest < RANK_TOLERANCE * largest {
        return Err(Error::RankDeficient {
            smallest_eigenvalue: smallest,
            largest_eigenvalue: largest,
        });
    }
    let inv_sqrt = DVector::from_iterator(p, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let whitening =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let mut x = centered * whitening;

    // one refinement pass removes the rounding left by the eigensolver
    let gram = (x.transpose() * &x) / n as f64;
    let eig = SymmetricEigen::new(gram);
    let inv_sqrt = DVector::from_iterator(p, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    x = &x * (&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose());
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(NormalizedDesign { x })
}

/// Diagonal of the hat matrix `X(XᵀX)⁻¹Xᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeverageVector(Vec<f64>);

impl LeverageVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `h_i = ‖x_i‖² / n` under the normalization.
pub fn leverage(design: &NormalizedDesign) -> LeverageVector {
    let n = design.n() as f64;
    LeverageVector(design.row_norms_sq().into_iter().map(|q| q / n).collect())
}

/// Nearest-rank (inclusive) quantile of an ascending slice.
pub fn nearest_rank_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Clips each column into its `[q_lo, q_hi]` nearest-rank quantile range.
pub fn winsorize(raw: &RawCovariates, q_lo: f64, q_hi: f64) -> Result<RawCovariates> {
    if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) || q_lo >= q_hi {
        return Err(Error::InvalidInput(format!(
            "winsorization needs 0 <= q_lo < q_hi <= 1, got ({q_lo}, {q_hi})"
        )));
    }
    let mut values = raw.values().clone();
    for mut col in values.column_iter_mut() {
        let mut sorted: Vec<f64> = col.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let lo = nearest_rank_quantile(&sorted, q_lo);
        let hi = nearest_rank_quantile(&sorted, q_hi);
        for v in col.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    RawCovariates::new(values)
}

/// Reads a covariate CSV with header `x1..xp`.
pub fn read_covariates_csv(path: &Path) -> Result<RawCovariates> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = reader.headers()?.clone();
    let columns: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| is_covariate_header(h))
        .map(|(k, _)| k)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = columns
            .iter()
            .map(|&k| parse_field(&record[k]))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    RawCovariates::from_rows(&rows)
}

pub(crate) fn is_covariate_header(h: &str) -> bool {
    h.strip_prefix('x')
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

pub(crate) fn parse_field(field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("cannot parse number {field:?}")))
}

/// Writes a matrix as a covariate CSV with header `x1..xp`.
pub fn write_covariates_csv(path: &Path, x: &DMatrix<f64>, comment: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in x.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
