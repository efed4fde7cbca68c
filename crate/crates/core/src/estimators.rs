//! Difference-in-means, arm-wise OLS adjustment, Neumann corrections and
//! the algebraic audit of the OLS error decomposition.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::design_matrix::NormalizedDesign;
use crate::error::{Error, Result};
use crate::folding::NeumannWeightVector;
use crate::format_float;

/// Smallest admissible eigenvalue of an arm covariance.
pub const ARM_SINGULARITY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

impl PotentialOutcomes {
    pub fn new(y1: Vec<f64>, y0: Vec<f64>) -> Result<Self> {
        if y1.len() != y0.len() {
            return Err(Error::Dimension("potential outcome lengths differ".into()));
        }
        if y1.iter().chain(&y0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("potential outcomes must be finite".into()));
        }
        Ok(Self { y1, y0 })
    }

    pub fn n(&self) -> usize {
        self.y1.len()
    }

    pub fn tau(&self) -> f64 {
        mean(&self.y1) - mean(&self.y0)
    }

    pub fn arm(&self, arm: u8) -> &[f64] {
        if arm == 1 {
            &self.y1
        } else {
            &self.y0
        }
    }
}

/// Treated set of a completely randomized experiment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    n: usize,
    treated: Vec<usize>,
    control: Vec<usize>,
}

impl Assignment {
    pub fn new(n: usize, mut treated: Vec<usize>) -> Result<Self> {
        treated.sort_unstable();
        treated.dedup();
        if treated.last().is_some_and(|&t| t >= n) {
            return Err(Error::InvalidInput("treated index out of range".into()));
        }
        if treated.is_empty() || treated.len() >= n {
            return Err(Error::InvalidInput(format!(
                "need 1 <= n1 <= n-1, got n1 = {} with n = {n}",
                treated.len()
            )));
        }
        let mut flags = vec![false; n];
        for &t in &treated {
            flags[t] = true;
        }
        let control = (0..n).filter(|&i| !flags[i]).collect();
        Ok(Self {
            n,
            treated,
            control,
        })
    }

    pub fn from_flags(flags: &[bool]) -> Result<Self> {
        let treated = flags
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| t.then_some(i))
            .collect();
        Self::new(flags.len(), treated)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n1(&self) -> usize {
        self.treated.len()
    }

    pub fn n0(&self) -> usize {
        self.control.len()
    }

    pub fn treated(&self) -> &[usize] {
        &self.treated
    }

    pub fn control(&self) -> &[usize] {
        &self.control
    }

    /// `S_α`: units in arm `α` (1 = treated).
    pub fn arm(&self, arm: u8) -> &[usize] {
        if arm == 1 {
            &self.treated
        } else {
            &self.control
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObservedData<'a> {
    pub design: &'a NormalizedDesign,
    pub assignment: Assignment,
    pub y: Vec<f64>,
}

impl<'a> ObservedData<'a> {
    pub fn new(design: &'a NormalizedDesign, assignment: Assignment, y: Vec<f64>) -> Result<Self> {
        if y.len() != design.n() || assignment.n() != design.n() {
            return Err(Error::Dimension(format!(
                "design has {} units, outcomes {}, assignment {}",
                design.n(),
                y.len(),
                assignment.n()
            )));
        }
        Ok(Self {
            design,
            assignment,
            y,
        })
    }

    /// `Y_i = T_i y1_i + (1 − T_i) y0_i`.
    pub fn from_potential(
        design: &'a NormalizedDesign,
        outcomes: &PotentialOutcomes,
        assignment: Assignment,
    ) -> Result<Self> {
        let mut y = outcomes.y0.clone();
        for &t in assignment.treated() {
            y[t] = outcomes.y1[t];
        }
        Self::new(design, assignment, y)
    }

    fn arm_values(&self, arm: u8) -> Vec<f64> {
        self.assignment.arm(arm).iter().map(|&i| self.y[i]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ArmFit {
    pub arm: u8,
    pub mu_hat: f64,
    pub beta_hat: DVector<f64>,
    /// In-sample residuals, aligned with `Assignment::arm(arm)`.
    pub residuals: Vec<f64>,
    pub xbar: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct PopulationFit {
    pub mu: f64,
    pub beta: DVector<f64>,
    pub residuals: Vec<f64>,
}

/// Population regression of `y` on `[1, X]` under the design normalization.
pub fn population_ols(design: &NormalizedDesign, y: &[f64]) -> Result<PopulationFit> {
    if y.len() != design.n() {
        return Err(Error::Dimension("outcome length differs from n".into()));
    }
    let x = design.matrix();
    let yv = DVector::from_column_slice(y);
    let mu = yv.mean();
    let beta = x.tr_mul(&yv) / design.n() as f64;
    let fitted = x * &beta;
    let residuals = y
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| y - mu - f)
        .collect();
    Ok(PopulationFit {
        mu,
        beta,
        residuals,
    })
}

pub fn dim(observed: &ObservedData<'_>) -> f64 {
    mean(&observed.arm_values(1)) - mean(&observed.arm_values(0))
}

/// Rows of `X` for `units`.
pub(crate) fn rows(x: &DMatrix<f64>, units: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(units.len(), x.ncols(), |r, c| x[(units[r], c)])
}

/// `x̄_S` and `Σ_S` for a subset of units.
pub fn subset_moments(x: &DMatrix<f64>, units: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let xs = rows(x, units);
    let m = units.len() as f64;
    let xbar = DVector::from_iterator(xs.ncols(), xs.column_iter().map(|c| c.mean()));
    let mut centered = xs;
    for (mut col, mu) in centered.column_iter_mut().zip(xbar.iter()) {
        col.add_scalar_mut(-mu);
    }
    let sigma = centered.tr_mul(&centered) / m;
    (xbar, sigma)
}

pub fn arm_ols(observed: &ObservedData<'_>, arm: u8) -> Result<ArmFit> {
    let units = observed.assignment.arm(arm);
    let p = observed.design.p();
    let size = units.len();
    if size < p + 2 {
        return Err(Error::ArmTooSmall {
            arm,
            size,
            required: p + 2,
        });
    }
    let x = observed.design.matrix();
    let (xbar, sigma) = subset_moments(x, units);
    if p > 0 {
        let smallest = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if smallest < ARM_SINGULARITY_TOLERANCE {
            return Err(Error::SingularArmCovariance {
                arm,
                smallest_eigenvalue: smallest,
            });
        }
    }
    let y = DVector::from_vec(observed.arm_values(arm));
    // least squares on [1, X_α] through a thin QR factorization
    let xs = rows(x, units);
    let aug = DMatrix::from_fn(size, p + 1, |r, c| if c == 0 { 1.0 } else { xs[(r, c - 1)] });
    let qr = aug.qr();
    let rhs = qr.q().tr_mul(&y);
    let coef = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or(Error::SingularArmCovariance {
            arm,
            smallest_eigenvalue: 0.0,
        })?;
    let beta_hat = coef.rows(1, p).into_owned();
    let mu_hat = y.mean() - xbar.dot(&beta_hat);
    let fitted = &xs * &beta_hat;
    let residuals = (0..size).map(|k| y[k] - mu_hat - fitted[k]).collect();
    Ok(ArmFit {
        arm,
        mu_hat,
        beta_hat,
        residuals,
        xbar,
        sigma,
    })
}

/// `μ̂₁ − μ̂₀`.
pub fn ols_ra(observed: &ObservedData<'_>) -> Result<f64> {
    Ok(arm_ols(observed, 1)?.mu_hat - arm_ols(observed, 0)?.mu_hat)
}

/// Weight vectors for degrees `0..=D`; arm 1 uses `m = n1`, arm 0 uses `m = n0`.
#[derive(Debug, Clone)]
pub struct CorrectionWeights {
    pub arm1: Vec<NeumannWeightVector>,
    pub arm0: Vec<NeumannWeightVector>,
}

impl CorrectionWeights {
    pub fn arm(&self, arm: u8) -> &[NeumannWeightVector] {
        if arm == 1 {
            &self.arm1
        } else {
            &self.arm0
        }
    }

    pub fn max_degree(&self) -> Option<usize> {
        self.arm1.len().min(self.arm0.len()).checked_sub(1)
    }
}

#[derive(Debug, Clone)]
pub struct Corrections {
    pub tau_ols: f64,
    /// `R̂^[d']_1` for `d' = 0..=D`.
    pub terms1: Vec<f64>,
    /// `R̂^[d']_0` for `d' = 0..=D`.
    pub terms0: Vec<f64>,
    /// `τ̂^[d']` for `d' = 0..=D`; the last entry is `τ̂^[D]`.
    pub estimates: Vec<f64>,
}

impl Corrections {
    pub fn corrected(&self) -> f64 {
        self.estimates.last().copied().unwrap_or(self.tau_ols)
    }
}

/// Sample-analog corrections from in-sample residuals.
pub fn corrections(observed: &ObservedData<'_>, weights: &CorrectionWeights) -> Result<Corrections> {
    let fits = [arm_ols(observed, 0)?, arm_ols(observed, 1)?];
    let tau_ols = fits[1].mu_hat - fits[0].mu_hat;
    let mut terms = [Vec::new(), Vec::new()];
    for arm in [0u8, 1] {
        let units = observed.assignment.arm(arm);
        let size = units.len();
        for w in weights.arm(arm) {
            if w.m != size {
                return Err(Error::WeightArmMismatch {
                    arm,
                    expected: size,
                    found: w.m,
                });
            }
            if w.xi.len() != observed.design.n() {
                return Err(Error::Dimension("weight vector length differs from n".into()));
            }
            let sum: f64 = units
                .iter()
                .zip(&fits[arm as usize].residuals)
                .map(|(&i, r)| w.xi[i] * r)
                .sum();
            terms[arm as usize].push(sum / size as f64);
        }
    }
    let [terms0, terms1] = terms;
    let mut estimates = Vec::with_capacity(terms1.len());
    let mut acc = tau_ols;
    for (t1, t0) in terms1.iter().zip(&terms0) {
        acc += t1 - t0;
        estimates.push(acc);
    }
    Ok(Corrections {
        tau_ols,
        terms1,
        terms0,
        estimates,
    })
}

/// `R^[d'] = x̄_Sᵀ (I − Σ_S)^{d'} u_S` for `d' = 0..=D`, with
/// `u_S = (1/|S|) Σ_{i∈S} (x_i − x̄_S) r_i`.
pub fn neumann_terms(x: &DMatrix<f64>, r: &[f64], units: &[usize], max_degree: usize) -> Vec<f64> {
    let (xbar, sigma) = subset_moments(x, units);
    let u = subset_u(x, r, units, &xbar);
    let delta = DMatrix::identity(x.ncols(), x.ncols()) - sigma;
    let mut v = u;
    let mut out = Vec::with_capacity(max_degree + 1);
    for d in 0..=max_degree {
        if d > 0 {
            v = &delta * v;
        }
        out.push(xbar.dot(&v));
    }
    out
}

fn subset_u(x: &DMatrix<f64>, r: &[f64], units: &[usize], xbar: &DVector<f64>) -> DVector<f64> {
    let mut u = DVector::zeros(x.ncols());
    for &i in units {
        let row = x.row(i).transpose() - xbar;
        u.axpy(r[i], &row, 1.0);
    }
    u / units.len() as f64
}

/// Every piece of `τ̂_OLS − τ = τ̂^res_DiM − (R₁ − R₀)` for one assignment.
#[derive(Debug, Clone)]
pub struct DecompositionAudit {
    pub tau: f64,
    pub tau_hat_ols: f64,
    pub residual_dim: f64,
    /// `R_α`, indexed by arm.
    pub remainder: [f64; 2],
    /// `R^[d']_α` for `d' = 0..=D`, indexed by arm.
    pub neumann: [Vec<f64>; 2],
    /// `R_α − Σ_{d'≤D} R^[d']_α`.
    pub tail: [f64; 2],
    /// `‖I − Σ_α‖`.
    pub delta_opnorm: [f64; 2],
    /// `‖u_α‖`, `‖x̄_α‖`.
    pub u_norm: [f64; 2],
    pub xbar_norm: [f64; 2],
    /// `max |β̂_α − β_α − Σ_α⁻¹ u_α|`.
    pub coefficient_identity_error: [f64; 2],
}

impl DecompositionAudit {
    /// `|(τ̂_OLS − τ) − (τ̂^res_DiM − (R₁ − R₀))|`.
    pub fn identity_error(&self) -> f64 {
        ((self.tau_hat_ols - self.tau)
            - (self.residual_dim - (self.remainder[1] - self.remainder[0])))
            .abs()
    }
}

pub fn decomposition_audit(
    design: &NormalizedDesign,
    outcomes: &PotentialOutcomes,
    assignment: &Assignment,
    max_degree: usize,
) -> Result<DecompositionAudit> {
    let observed = ObservedData::from_potential(design, outcomes, assignment.clone())?;
    let x = design.matrix();
    let p = design.p();
    let mut remainder = [0.0; 2];
    let mut neumann = [Vec::new(), Vec::new()];
    let mut tail = [0.0; 2];
    let mut delta_opnorm = [0.0; 2];
    let mut u_norm = [0.0; 2];
    let mut xbar_norm = [0.0; 2];
    let mut coef_err = [0.0; 2];
    let mut res_means = [0.0; 2];
    let mut mu_hat = [0.0; 2];
    for arm in [0u8, 1] {
        let a = arm as usize;
        let units = assignment.arm(arm);
        let pop = population_ols(design, outcomes.arm(arm))?;
        let fit = arm_ols(&observed, arm)?;
        mu_hat[a] = fit.mu_hat;
        let r = &pop.residuals;
        res_means[a] = units.iter().map(|&i| r[i]).sum::<f64>() / units.len() as f64;
        let u = subset_u(x, r, units, &fit.xbar);
        let sigma_inv = fit
            .sigma
            .clone()
            .try_inverse()
            .ok_or(Error::SingularArmCovariance {
                arm,
                smallest_eigenvalue: 0.0,
            })?;
        let solved = &sigma_inv * &u;
        remainder[a] = fit.xbar.dot(&solved);
        neumann[a] = neumann_terms(x, r, units, max_degree);
        tail[a] = remainder[a] - neumann[a].iter().sum::<f64>();
        let delta = DMatrix::identity(p, p) - &fit.sigma;
        delta_opnorm[a] = spectral_norm(&delta);
        u_norm[a] = u.norm();
        xbar_norm[a] = fit.xbar.norm();
        coef_err[a] = (&fit.beta_hat - &pop.beta - solved).amax();
    }
    Ok(DecompositionAudit {
        tau: outcomes.tau(),
        tau_hat_ols: mu_hat[1] - mu_hat[0],
        residual_dim: res_means[1] - res_means[0],
        remainder,
        neumann,
        tail,
        delta_opnorm,
        u_norm,
        xbar_norm,
        coefficient_identity_error: coef_err,
    })
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.amax()
}

/// One row of the per-assignment estimate table.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub assignment_id: usize,
    pub method: String,
    pub estimate: f64,
}

/// Method labels in output order: `dim`, `ols`, `neumann_d0..neumann_dD`.
pub fn method_names(max_degree: Option<usize>) -> Vec<String> {
    let mut names = vec!["dim".to_string(), "ols".to_string()];
    if let Some(d) = max_degree {
        names.extend((0..=d).map(|k| format!("neumann_d{k}")));
    }
    names
}

/// All estimators for one observed assignment, in [`method_names`] order.
pub fn estimate_all(observed: &ObservedData<'_>, weights: Option<&CorrectionWeights>) -> Result<Vec<f64>> {
    let mut out = vec![dim(observed)];
    match weights {
        Some(w) if w.max_degree().is_some() => {
            let c = corrections(observed, w)?;
            out.push(c.tau_ols);
            out.extend(c.estimates);
        }
        _ => out.push(ols_ra(observed)?),
    }
    Ok(out)
}

pub fn write_estimates_csv(path: &Path, records: &[EstimateRecord], comment: Option<&str>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(c) = comment {
        writeln!(file, "# {c}")?;
    }
    writeln!(file, "assignment_id,method,estimate")?;
    for r in records {
        writeln!(file, "{},{},{}", r.assignment_id, r.method, format_float(r.estimate))?;
    }
    file.flush()?;
    Ok(())
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
