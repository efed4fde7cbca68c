//! Finite-population concentration envelopes for `‖I − Σ_S‖`, `‖u_S‖` and
//! `‖x̄_S‖`, and the resulting tail bound on the truncated Neumann remainder.
//!
//! Everything here is diagnostic: an uncertified envelope (`alpha ≥ 1`) is
//! reported, never raised as an error.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::design_matrix::{leverage, NormalizedDesign};
use crate::error::{Error, Result};
use crate::estimators::{spectral_norm, subset_moments};
use crate::format_float;
use crate::sampling::{derive_seed, srswor, substream, tag};

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("delta must lie in (0,1), got {delta}")));
    }
    Ok(())
}

fn check_size(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!("sample size {m} outside 1..={n}")));
    }
    Ok(())
}

fn population_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
}

/// Bernstein-type deviation for a without-replacement sample mean.
///
/// `sigma` is the population standard deviation, `range` the width of the
/// support and `log_term` the confidence logarithm.
pub fn bernstein_threshold(sigma: f64, range: f64, m: usize, n: usize, log_term: f64) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let gamma_sq = (nf - mf + 1.0) / nf * sigma * sigma
        + (mf - 1.0) / nf * sigma * range * (2.0 * log_term / mf).sqrt();
    (2.0 * gamma_sq * log_term / mf).sqrt() + 2.0 * range * log_term / (3.0 * mf)
}

/// Two-sided deviation of a size-`m` sample mean of `values`.
pub fn scalar_threshold(values: &[f64], m: usize, n: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    check_size(m, n)?;
    if values.len() != n {
        return Err(Error::Dimension(format!("{} values for population of {n}", values.len())));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(bernstein_threshold(population_sd(values), hi - lo, m, n, (4.0 / delta).ln()))
}

/// `(1/n) Σ M_i²` with `M_i = x_i x_iᵀ − I`.
///
/// Uses `M_i² = (‖x_i‖² − 2) x_i x_iᵀ + I`.
pub fn mean_square_deviation(design: &NormalizedDesign) -> DMatrix<f64> {
    let x = design.matrix();
    let q = design.row_norms_sq();
    let mut weighted = x.clone();
    for (mut row, qi) in weighted.row_iter_mut().zip(&q) {
        row *= qi - 2.0;
    }
    let n = design.n() as f64;
    weighted.tr_mul(x) / n + DMatrix::identity(design.p(), design.p())
}

/// Matrix-Bernstein threshold `(t_mat, v, c)` for `‖Σ_S − I‖` at sample size `m`.
pub fn matrix_threshold(design: &NormalizedDesign, m: usize, delta: f64) -> Result<(f64, f64, f64)> {
    check_delta(delta)?;
    check_size(m, design.n())?;
    let p = design.p();
    if p == 0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let v = spectral_norm(&mean_square_deviation(design));
    // eigenvalues of x xᵀ − I: ‖x‖² − 1 once, −1 with multiplicity p − 1
    let floor = if p > 1 { 1.0 } else { 0.0 };
    let c = design
        .row_norms_sq()
        .iter()
        .map(|q| (q - 1.0).abs().max(floor))
        .fold(0.0, f64::max);
    let log_p = (4.0 * p as f64 / delta).ln();
    let mf = m as f64;
    let t = (2.0 * (v * log_p / mf).sqrt()).max(2.0 * c * log_p / mf);
    Ok((t, v, c))
}

/// Envelope quantities for one arm of size `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmEnvelope {
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon_tail: f64,
    pub t_q: f64,
    pub t_r: f64,
    pub t_r2: f64,
    pub t_mat: f64,
}

impl ArmEnvelope {
    pub fn certified(&self) -> bool {
        self.alpha < 1.0
    }
}

/// `2 α^{d+1} β γ / (1 − α)`, or `+∞` once `α ≥ 1`.
pub fn epsilon_tail(alpha: f64, beta: f64, gamma: f64, d: usize) -> f64 {
    if alpha >= 1.0 {
        return f64::INFINITY;
    }
    2.0 * alpha.powi(d as i32 + 1) * beta * gamma / (1.0 - alpha)
}

/// Envelopes for a single arm with residual vector `r` and sample size `m`.
pub fn arm_envelope(design: &NormalizedDesign, r: &[f64], m: usize, delta: f64, d: usize) -> Result<ArmEnvelope> {
    check_delta(delta)?;
    let n = design.n();
    check_size(m, n)?;
    if r.len() != n {
        return Err(Error::Dimension(format!("residual length {} != n = {n}", r.len())));
    }
    let p = design.p() as f64;
    let mf = m as f64;

    let q = design.row_norms_sq();
    let bx2 = q.iter().cloned().fold(0.0, f64::max);
    let t_q = bernstein_threshold(population_sd(&q), bx2, m, n, (2.0 / delta).ln());

    let log_r = (6.0 / delta).ln();
    let br = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let r2: Vec<f64> = r.iter().map(|v| v * v).collect();
    let rbar2 = r2.iter().sum::<f64>() / n as f64;
    let t_r2 = bernstein_threshold(population_sd(&r2), br * br, m, n, log_r);
    let t_r = bernstein_threshold(population_sd(r), 2.0 * br, m, n, log_r);

    let (t_mat, _, _) = matrix_threshold(design, m, delta)?;
    let gamma = ((p + t_q) / mf).sqrt();
    let alpha = t_mat + gamma * gamma;
    let beta = gamma * (rbar2 + t_r2).sqrt() + gamma * t_r;
    Ok(ArmEnvelope {
        m,
        alpha,
        beta,
        gamma,
        epsilon_tail: epsilon_tail(alpha, beta, gamma, d),
        t_q,
        t_r,
        t_r2,
        t_mat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub delta: f64,
    pub degree: usize,
    /// Envelope of the arm with the larger tail bound.
    pub worst_arm: u8,
    pub alpha_env: f64,
    pub beta_env: f64,
    pub gamma_env: f64,
    pub epsilon_tail: f64,
    pub t_q: f64,
    pub t_r: f64,
    pub t_r2: f64,
    pub t_mat: f64,
    pub max_leverage: f64,
    pub leverage_ratio: f64,
    pub v_mat: f64,
    pub c_mat: f64,
    pub arms: Vec<(u8, ArmEnvelope)>,
    pub coverage: Option<Coverage>,
}

impl EnvelopeReport {
    pub fn certified(&self) -> bool {
        self.alpha_env < 1.0
    }

    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("delta", format_float(self.delta));
        kv("d", self.degree.to_string());
        kv("worst_arm", self.worst_arm.to_string());
        kv("alpha_env", format_float(self.alpha_env));
        kv("beta_env", format_float(self.beta_env));
        kv("gamma_env", format_float(self.gamma_env));
        kv("epsilon_tail", format_float(self.epsilon_tail));
        kv("t_q", format_float(self.t_q));
        kv("t_r", format_float(self.t_r));
        kv("t_r2", format_float(self.t_r2));
        kv("t_mat", format_float(self.t_mat));
        kv("max_leverage", format_float(self.max_leverage));
        kv("leverage_ratio", format_float(self.leverage_ratio));
        kv("v_mat", format_float(self.v_mat));
        kv("c_mat", format_float(self.c_mat));
        for (arm, env) in &self.arms {
            kv(&format!("arm{arm}.m"), env.m.to_string());
            kv(&format!("arm{arm}.alpha_env"), format_float(env.alpha));
            kv(&format!("arm{arm}.epsilon_tail"), format_float(env.epsilon_tail));
        }
        kv(
            "status",
            if self.certified() { "certified".into() } else { "Neumann series not certified convergent".into() },
        );
        if let Some(c) = &self.coverage {
            kv("coverage.draws", c.draws.to_string());
            kv("coverage.alpha", format_float(c.alpha_fraction));
            kv("coverage.beta", format_float(c.beta_fraction));
            kv("coverage.gamma", format_float(c.gamma_fraction));
        }
        out
    }
}

/// Envelope report for a treated arm of size `m` (control arm `n − m`).
///
/// A side whose size is zero is skipped; the headline fields describe the
/// arm with the larger tail bound (ties broken by `alpha`).
pub fn envelope_report(
    design: &NormalizedDesign,
    r1: &[f64],
    r0: &[f64],
    m: usize,
    delta: f64,
    d: usize,
) -> Result<EnvelopeReport> {
    check_delta(delta)?;
    let n = design.n();
    check_size(m, n)?;
    for r in [r1, r0] {
        let s: f64 = r.iter().sum();
        let scale = r.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        if s.abs() > 1e-8 * scale {
            return Err(Error::InvalidInput("residuals must sum to zero".into()));
        }
    }
    let mut arms = vec![(1u8, arm_envelope(design, r1, m, delta, d)?)];
    if m < n {
        arms.push((0u8, arm_envelope(design, r0, n - m, delta, d)?));
    }
    let (worst_arm, worst) = arms
        .iter()
        .max_by(|a, b| {
            (a.1.epsilon_tail, a.1.alpha)
                .partial_cmp(&(b.1.epsilon_tail, b.1.alpha))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .cloned()
        .expect("at least one arm");
    let (_, v_mat, c_mat) = matrix_threshold(design, worst.m, delta)?;
    let lev = leverage(design);
    let base = design.p() as f64 / n as f64;
    Ok(EnvelopeReport {
        delta,
        degree: d,
        worst_arm,
        alpha_env: worst.alpha,
        beta_env: worst.beta,
        gamma_env: worst.gamma,
        epsilon_tail: worst.epsilon_tail,
        t_q: worst.t_q,
        t_r: worst.t_r,
        t_r2: worst.t_r2,
        t_mat: worst.t_mat,
        max_leverage: lev.max(),
        leverage_ratio: if base > 0.0 { lev.max() / base } else { 0.0 },
        v_mat,
        c_mat,
        arms,
        coverage: None,
    })
}

/// Empirical `‖I − Σ_S‖`, `‖u_S‖`, `‖x̄_S‖` over random SRSWOR draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub draws: usize,
    pub delta_opnorm: Vec<f64>,
    pub u_norm: Vec<f64>,
    pub xbar_norm: Vec<f64>,
    pub alpha_fraction: f64,
    pub beta_fraction: f64,
    pub gamma_fraction: f64,
}

/// The three norms for one sampled index set.
pub fn sample_norms(design: &NormalizedDesign, r: &[f64], units: &[usize]) -> (f64, f64, f64) {
    let x = design.matrix();
    let (xbar, sigma) = subset_moments(x, units);
    let p = design.p();
    let delta = DMatrix::identity(p, p) - sigma;
    let mut u = nalgebra::DVector::zeros(p);
    for &i in units {
        let xi = x.row(i).transpose();
        u += (xi - &xbar) * r[i];
    }
    u /= units.len() as f64;
    (spectral_norm(&delta), u.norm(), xbar.norm())
}

/// Monte-Carlo check of an arm envelope with `draws` size-`env.m` samples.
pub fn coverage(
    design: &NormalizedDesign,
    r: &[f64],
    env: &ArmEnvelope,
    draws: usize,
    seed: u64,
) -> Result<Coverage> {
    let n = design.n();
    check_size(env.m, n)?;
    if r.len() != n {
        return Err(Error::Dimension(format!("residual length {} != n = {n}", r.len())));
    }
    let base = derive_seed(seed, &[tag::ENVELOPE]);
    let norms: Vec<(f64, f64, f64)> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(base, k as u64);
            let units = srswor(&mut rng, n, env.m);
            sample_norms(design, r, &units)
        })
        .collect();
    let frac = |hit: usize| if draws == 0 { 0.0 } else { hit as f64 / draws as f64 };
    let alpha_hits = norms.iter().filter(|t| t.0 <= env.alpha).count();
    let beta_hits = norms.iter().filter(|t| t.1 <= env.beta).count();
    let gamma_hits = norms.iter().filter(|t| t.2 <= env.gamma).count();
    Ok(Coverage {
        draws,
        delta_opnorm: norms.iter().map(|t| t.0).collect(),
        u_norm: norms.iter().map(|t| t.1).collect(),
        xbar_norm: norms.iter().map(|t| t.2).collect(),
        alpha_fraction: frac(alpha_hits),
        beta_fraction: frac(beta_hits),
        gamma_fraction: frac(gamma_hits),
    })
}
