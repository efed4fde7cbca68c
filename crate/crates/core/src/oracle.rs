//! Brute-force references: exhaustive subset averages, injective label
//! enumeration, and exact randomization moments. Only meant for small `n`.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};

use crate::combinatorics::{AnnotatedWord, SetPartition};
use crate::design_matrix::NormalizedDesign;
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_all, neumann_terms, subset_moments, Assignment, CorrectionWeights, ObservedData,
    PotentialOutcomes,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBudget {
    pub max_subsets: u128,
    pub max_labels: u128,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            max_subsets: 1_000_000,
            max_labels: 10_000_000,
        }
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k as u128).fold(1u128, |acc, j| acc * (n as u128 - j) / (j + 1))
}

fn check(required: u128, budget: u128) -> Result<()> {
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok(())
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1..=8 => values.iter().sum(),
        len => {
            let (a, b) = values.split_at(len / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Average of `f` over every size-`k` subset of `0..n`, in lexicographic order.
pub fn exact_subset_average<F>(n: usize, k: usize, budget: &OracleBudget, mut f: F) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    check(binomial(n, k), budget.max_subsets)?;
    let mut values = Vec::with_capacity(binomial(n, k) as usize);
    for subset in (0..n).combinations(k) {
        values.push(f(&subset)?);
    }
    Ok(pairwise_sum(&values) / values.len() as f64)
}

/// `x̄_Sᵀ (I − Σ_S)^d v` by dense linear algebra.
fn series_form(x: &DMatrix<f64>, units: &[usize], d: usize, v: DVector<f64>) -> f64 {
    let (xbar, sigma) = subset_moments(x, units);
    let delta = DMatrix::identity(x.ncols(), x.ncols()) - sigma;
    let mut v = v;
    for _ in 0..d {
        v = &delta * v;
    }
    xbar.dot(&v)
}

/// `E[x̄_Sᵀ (I − Σ_S)^d (x_i − x̄_S) | i ∈ S]` over all size-`m` subsets.
pub fn exact_weight(
    d: usize,
    m: usize,
    design: &NormalizedDesign,
    i: usize,
    budget: &OracleBudget,
) -> Result<f64> {
    let n = design.n();
    if m == 0 || m > n || i >= n {
        return Err(Error::InvalidInput(format!("need 1 <= m <= n and i < n (m={m}, i={i})")));
    }
    let x = design.matrix();
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    exact_subset_average(n - 1, m - 1, budget, |picked| {
        let mut units: Vec<usize> = picked.iter().map(|&k| others[k]).collect();
        units.push(i);
        units.sort_unstable();
        let (xbar, _) = subset_moments(x, &units);
        let xi = x.row(i).transpose() - xbar;
        Ok(series_form(x, &units, d, xi))
    })
}

/// `E[R^[d]]` for residual vector `r` over all size-`m` subsets.
pub fn exact_expectation(
    d: usize,
    m: usize,
    design: &NormalizedDesign,
    r: &[f64],
    budget: &OracleBudget,
) -> Result<f64> {
    let n = design.n();
    if m == 0 || m > n || r.len() != n {
        return Err(Error::InvalidInput("need 1 <= m <= n and |r| = n".into()));
    }
    let x = design.matrix();
    exact_subset_average(n, m, budget, |units| Ok(neumann_terms(x, r, units, d)[d]))
}

/// Class-0 and Class-1 sums of design monomials over injective labelings.
pub fn injective_aggregates(
    word: &AnnotatedWord,
    pi: &SetPartition,
    design: &NormalizedDesign,
    i: usize,
    budget: &OracleBudget,
) -> Result<(f64, f64)> {
    if pi.base_size() != word.len {
        return Err(Error::BaseMismatch {
            expected: word.len,
            found: pi.base_size(),
        });
    }
    let n = design.n();
    let l = pi.block_count();
    if l > n {
        return Ok((0.0, 0.0));
    }
    let required = (0..l as u128).fold(1u128, |acc, k| acc * (n as u128 - k));
    check(required, budget.max_labels)?;
    let g = design.gram();
    let edges: Vec<(usize, usize)> = word
        .edges
        .iter()
        .map(|&(s, t)| (pi.index(s), pi.index(t)))
        .collect();
    let anchor = word.is_anchored().then(|| pi.index(word.anchor_vertex()));
    let mut class0 = Vec::new();
    let mut class1 = Vec::new();
    for labels in (0..n).permutations(l) {
        let mut term: f64 = edges.iter().map(|&(a, b)| g[(labels[a], labels[b])]).product();
        if let Some(a) = anchor {
            term *= g[(labels[a], i)];
        }
        if labels.contains(&i) {
            class1.push(term);
        } else {
            class0.push(term);
        }
    }
    Ok((pairwise_sum(&class0), pairwise_sum(&class1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorId {
    Dim,
    Ols,
    /// Corrected estimator with all degrees up to and including `D`.
    Neumann(usize),
}

/// Exact mean and variance (divisor = number of assignments) of an estimator
/// over all `C(n, n1)` equiprobable assignments.
pub fn exact_randomization_moments(
    design: &NormalizedDesign,
    outcomes: &PotentialOutcomes,
    n1: usize,
    estimator: EstimatorId,
    weights: Option<&CorrectionWeights>,
    budget: &OracleBudget,
) -> Result<(f64, f64)> {
    let n = design.n();
    check(binomial(n, n1), budget.max_subsets)?;
    let index = match estimator {
        EstimatorId::Dim => 0,
        EstimatorId::Ols => 1,
        EstimatorId::Neumann(d) => {
            let available = weights.and_then(CorrectionWeights::max_degree);
            if available.is_none_or(|m| m < d) {
                return Err(Error::InvalidInput(format!(
                    "weights up to degree {d} are required"
                )));
            }
            2 + d
        }
    };
    let weights = match estimator {
        EstimatorId::Dim => None,
        _ => weights,
    };
    let mut values = Vec::new();
    for treated in (0..n).combinations(n1) {
        let observed = ObservedData::from_potential(design, outcomes, Assignment::new(n, treated)?)?;
        let est = if index == 0 {
            crate::estimators::dim(&observed)
        } else {
            estimate_all(&observed, weights)?[index]
        };
        values.push(est);
    }
    let count = values.len() as f64;
    let mean = pairwise_sum(&values) / count;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    Ok((mean, pairwise_sum(&sq) / count))
}
