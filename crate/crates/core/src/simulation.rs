//! Monte-Carlo experiment harness: master covariate matrix, per-γ instances,
//! repeated complete randomization, and normalized bias/variance metrics.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::Deserialize;

use crate::design_matrix::{leverage, normalize, winsorize, NormalizedDesign, RawCovariates};
use crate::error::{Error, Result};
use crate::estimators::{estimate_all, method_names, population_ols, Assignment, CorrectionWeights, ObservedData, PotentialOutcomes};
use crate::folding::GramContext;
use crate::format_float;
use crate::sampling::{derive_seed, srswor, substream, tag};
use crate::weights::WeightService;

/// Build identifier embedded in every CSV.
pub const VERSION_LINE: &str = concat!("neumann-ra ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateDist {
    Gaussian,
    StudentT(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualModel {
    Typical,
    WorstCase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub n1: usize,
    pub gamma_grid: Vec<f64>,
    pub dist: CovariateDist,
    pub winsorize: Option<(f64, f64)>,
    pub residual_model: ResidualModel,
    /// Assignments per instance.
    pub assignments: usize,
    /// Outer replicates.
    pub replicates: usize,
    pub degrees: Vec<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            n1: 150,
            gamma_grid: (0..=7).map(|k| k as f64 / 10.0).collect(),
            dist: CovariateDist::Gaussian,
            winsorize: None,
            residual_model: ResidualModel::WorstCase,
            assignments: 2000,
            replicates: 50,
            degrees: vec![0, 1],
            seed: 20240601,
        }
    }
}

/// On-disk form; every key optional and defaulted.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    n: Option<usize>,
    n1: Option<usize>,
    gamma_grid: Option<Vec<f64>>,
    dist: Option<String>,
    nu: Option<f64>,
    winsorize: Option<[f64; 2]>,
    residual_model: Option<ResidualModel>,
    #[serde(rename = "N", alias = "assignments")]
    assignments: Option<usize>,
    #[serde(rename = "R", alias = "replicates")]
    replicates: Option<usize>,
    degrees: Option<Vec<usize>>,
    seed: Option<u64>,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        if let Some(n) = file.n {
            cfg.n = n;
            // keep the default treated share when only n is given
            cfg.n1 = ((n as f64) * 0.3).round() as usize;
        }
        if let Some(v) = file.n1 {
            cfg.n1 = v;
        }
        if let Some(v) = file.gamma_grid {
            cfg.gamma_grid = v;
        }
        cfg.dist = match file.dist.as_deref() {
            None | Some("gaussian") => CovariateDist::Gaussian,
            Some("student_t") | Some("t") => CovariateDist::StudentT(file.nu.unwrap_or(2.0)),
            Some(other) => return Err(Error::Config(format!("unknown dist '{other}'"))),
        };
        cfg.winsorize = file.winsorize.map(|[a, b]| (a, b));
        if let Some(v) = file.residual_model {
            cfg.residual_model = v;
        }
        if let Some(v) = file.assignments {
            cfg.assignments = v;
        }
        if let Some(v) = file.replicates {
            cfg.replicates = v;
        }
        if let Some(v) = file.degrees {
            cfg.degrees = v;
        }
        if let Some(v) = file.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 3 || self.n1 == 0 || self.n1 >= self.n {
            return bad(format!("need 1 <= n1 <= n-1 with n >= 3, got n={} n1={}", self.n, self.n1));
        }
        if self.assignments == 0 || self.replicates == 0 {
            return bad("N and R must be positive".into());
        }
        if self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| !(0.0..1.0).contains(g)) {
            return bad("gamma values must lie in [0,1)".into());
        }
        if let CovariateDist::StudentT(nu) = self.dist {
            if !(nu > 0.0) {
                return bad(format!("student_t needs nu > 0, got {nu}"));
            }
        }
        if let Some((lo, hi)) = self.winsorize {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return bad(format!("winsorize needs 0 <= lo < hi <= 1, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }

    pub fn n0(&self) -> usize {
        self.n - self.n1
    }

    /// Methods written for this config, in output order.
    pub fn methods(&self) -> Vec<String> {
        let mut names = vec!["dim".to_string(), "ols".to_string()];
        let mut degrees = self.degrees.clone();
        degrees.sort_unstable();
        degrees.dedup();
        names.extend(degrees.iter().map(|d| format!("neumann_d{d}")));
        names
    }

    /// Stable text rendering, used to tag resumable partial files.
    pub fn signature(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "n={};n1={};gamma={:?};dist={:?};winsorize={:?};model={:?};N={};R={};degrees={:?};seed={}",
            self.n,
            self.n1,
            self.gamma_grid,
            self.dist,
            self.winsorize,
            self.residual_model,
            self.assignments,
            self.replicates,
            self.degrees,
            self.seed
        );
        s
    }
}

/// `p = ⌈n^γ⌉`, at least 1.
pub fn covariate_count(n: usize, gamma: f64) -> usize {
    let p = (n as f64).powf(gamma);
    // guard against n^γ landing a hair above an integer
    let rounded = p.round();
    let p = if (p - rounded).abs() < 1e-9 { rounded } else { p.ceil() };
    (p as usize).max(1)
}

/// `n × n` matrix of i.i.d. draws, filled column by column.
pub fn generate_master(n: usize, dist: CovariateDist, seed: u64) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::InvalidInput("master matrix needs n >= 2".into()));
    }
    let mut rng = substream(derive_seed(seed, &[tag::MASTER]), 0);
    Ok(match dist {
        CovariateDist::Gaussian => DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)),
        CovariateDist::StudentT(nu) => {
            let t = StudentT::new(nu).map_err(|e| Error::InvalidInput(e.to_string()))?;
            DMatrix::from_fn(n, n, |_, _| t.sample(&mut rng))
        }
    })
}

/// `(I − H) v` for the hat matrix of `[1, X]` under the design normalization.
fn residualize(design: &NormalizedDesign, v: &DVector<f64>) -> DVector<f64> {
    let x = design.matrix();
    let mean = v.mean();
    let coef = x.tr_mul(v) / design.n() as f64;
    let mut out = v - x * coef;
    out.add_scalar_mut(-mean);
    out
}

/// Unit-scaled (`‖ε‖² = n`) maximizer of `|hᵀε|` over residual-feasible `ε`.
///
/// Fails with `DegenerateDirection` when leverages are (numerically) constant.
pub fn worst_case_direction(design: &NormalizedDesign) -> Result<Vec<f64>> {
    let n = design.n();
    let p = design.p();
    let h = leverage(design);
    let target = DVector::from_iterator(n, h.values().iter().map(|v| v - p as f64 / n as f64));
    let e = residualize(design, &target);
    let norm = e.norm();
    if norm < 1e-12 * (n as f64).sqrt() {
        return Err(Error::DegenerateDirection);
    }
    Ok((e * ((n as f64).sqrt() / norm)).iter().copied().collect())
}

/// Worst-case residual, falling back to any feasible unit-scaled vector.
pub fn worst_case_residual(design: &NormalizedDesign) -> Result<Vec<f64>> {
    match worst_case_direction(design) {
        Ok(e) => Ok(e),
        Err(Error::DegenerateDirection) => {
            warn!("worst-case direction degenerate; using a feasible fallback");
            feasible_fallback(design)
        }
        Err(e) => Err(e),
    }
}

fn feasible_fallback(design: &NormalizedDesign) -> Result<Vec<f64>> {
    let n = design.n();
    for j in 0..n {
        let mut basis = DVector::zeros(n);
        basis[j] = 1.0;
        let e = residualize(design, &basis);
        let norm = e.norm();
        if norm > 1e-6 {
            return Ok((e * ((n as f64).sqrt() / norm)).iter().copied().collect());
        }
    }
    Err(Error::DegenerateDirection)
}

/// `‖r1‖²/n1 + ‖r0‖²/n0 − ‖r1 − r0‖²/n`.
pub fn sigma_n2(r1: &[f64], r0: &[f64], n1: usize, n0: usize) -> Result<f64> {
    let n = n1 + n0;
    if r1.len() != n || r0.len() != n {
        return Err(Error::Dimension(format!("residual lengths must equal n1 + n0 = {n}")));
    }
    let ss = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>();
    let s = ss(&mut r1.iter().copied()) / n1 as f64 + ss(&mut r0.iter().copied()) / n0 as f64
        - ss(&mut r1.iter().zip(r0).map(|(a, b)| a - b)) / n as f64;
    if s <= 0.0 {
        return Err(Error::NonPositive(s));
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct ExperimentInstance {
    pub design: NormalizedDesign,
    pub outcomes: PotentialOutcomes,
    pub residuals: [Vec<f64>; 2],
    pub tau: f64,
    pub sigma_n2: f64,
    pub p: usize,
}

/// Slice, optionally winsorize, normalize, and attach outcomes for one γ.
///
/// `rng` supplies the coefficient direction and, for the typical model,
/// the residual draws.
pub fn build_instance<R: Rng + ?Sized>(
    master: &DMatrix<f64>,
    gamma: f64,
    config: &SimConfig,
    rng: &mut R,
) -> Result<ExperimentInstance> {
    let n = master.nrows();
    let p = covariate_count(n, gamma);
    if p + 2 > n || p > master.ncols() {
        return Err(Error::InvalidInput(format!("p = {p} too large for n = {n}")));
    }
    let mut raw = RawCovariates::new(master.columns(0, p).into_owned())?;
    if let Some((lo, hi)) = config.winsorize {
        raw = winsorize(&raw, lo, hi)?;
    }
    let design = normalize(&raw)?;

    let mut beta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = beta.norm();
    if norm > 0.0 {
        beta /= norm;
    }
    let signal = design.matrix() * &beta;

    let (eps1, eps0) = match config.residual_model {
        ResidualModel::Typical => {
            let e1: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let e0: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            (e1, e0)
        }
        ResidualModel::WorstCase => {
            let e = worst_case_residual(&design)?;
            (e.iter().map(|v| 3.0 * v).collect(), e)
        }
    };
    let y1: Vec<f64> = signal.iter().zip(&eps1).map(|(s, e)| s + e).collect();
    let y0: Vec<f64> = signal.iter().zip(&eps0).map(|(s, e)| s + e).collect();
    let outcomes = PotentialOutcomes::new(y1, y0)?;
    let r1 = population_ols(&design, &outcomes.y1)?.residuals;
    let r0 = population_ols(&design, &outcomes.y0)?.residuals;
    let tau = outcomes.tau();
    let n1 = config.n1.min(n - 1);
    let s2 = sigma_n2(&r1, &r0, n1, n - n1)?;
    Ok(ExperimentInstance {
        design,
        outcomes,
        residuals: [r0, r1],
        tau,
        sigma_n2: s2,
        p,
    })
}

/// Normalized metrics for one (replicate, γ, method) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub normalized_abs_bias: f64,
    pub normalized_variance: f64,
    pub nrmse: f64,
}

impl CellMetrics {
    pub fn from_estimates(estimates: &[f64], tau: f64, sigma_n2: f64, n: usize) -> Self {
        let k = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / k;
        let var = if estimates.len() > 1 {
            estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let bias = (mean - tau).abs() * (n as f64).sqrt() / sigma_n2.sqrt();
        let variance = var * n as f64 / sigma_n2;
        Self {
            normalized_abs_bias: bias,
            normalized_variance: variance,
            nrmse: (bias * bias + variance).sqrt(),
        }
    }

    fn get(&self, stat: &str) -> f64 {
        match stat {
            "normalized_abs_bias" => self.normalized_abs_bias,
            "normalized_variance" => self.normalized_variance,
            _ => self.nrmse,
        }
    }
}

pub const STATS: [&str; 3] = ["normalized_abs_bias", "normalized_variance", "nrmse"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub gamma: f64,
    pub method: String,
    pub metrics: CellMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub gamma: f64,
    pub method: String,
    pub stat: String,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub rows: Vec<MetricRow>,
    pub per_replicate: Vec<ReplicateMetrics>,
}

impl MetricsSummary {
    /// Per-replicate values of one stat, in replicate order.
    pub fn replicate_values(&self, gamma: f64, method: &str, stat: &str) -> Vec<f64> {
        self.per_replicate
            .iter()
            .filter(|r| r.gamma == gamma && r.method == method)
            .map(|r| r.metrics.get(stat))
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        len => {
            let h = (len - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Estimates of one replicate: `(gamma index, assignment, method index, value)` in output order.
#[derive(Debug, Clone, Default)]
pub struct ReplicateOutput {
    pub estimates: Vec<(usize, usize, usize, f64)>,
    pub metrics: Vec<ReplicateMetrics>,
}

/// One replicate: fresh master matrix, then every γ in the grid.
pub fn run_replicate(config: &SimConfig, replicate: usize, weights: &WeightService) -> Result<ReplicateOutput> {
    let n = config.n;
    let master = generate_master(n, config.dist, derive_seed(config.seed, &[replicate as u64]))?;
    let methods = config.methods();
    let all = {
        let max_d = config.degrees.iter().copied().max();
        method_names(max_d)
    };
    // positions of the configured methods inside the full estimator output
    let pick: Vec<usize> = methods
        .iter()
        .map(|m| all.iter().position(|a| a == m).expect("configured method"))
        .collect();

    let mut out = ReplicateOutput::default();
    for (gi, &gamma) in config.gamma_grid.iter().enumerate() {
        let mut rng = substream(derive_seed(config.seed, &[tag::RESIDUAL, replicate as u64, gi as u64]), 0);
        let inst = build_instance(&master, gamma, config, &mut rng)?;
        let cw = match config.degrees.iter().max() {
            Some(&max_d) => {
                let ctx = GramContext::new(&inst.design);
                Some(CorrectionWeights {
                    arm1: weights.ladder(&ctx, config.n1, max_d)?,
                    arm0: weights.ladder(&ctx, config.n0(), max_d)?,
                })
            }
            None => None,
        };
        let assign_seed = derive_seed(config.seed, &[tag::ASSIGNMENT, replicate as u64, gi as u64]);
        let per_draw: Vec<Vec<f64>> = (0..config.assignments)
            .into_par_iter()
            .map(|k| {
                let mut rng = substream(assign_seed, k as u64);
                let treated = srswor(&mut rng, n, config.n1);
                let assignment = Assignment::new(n, treated)?;
                let observed = ObservedData::from_potential(&inst.design, &inst.outcomes, assignment)?;
                let est = estimate_all(&observed, cw.as_ref())?;
                Ok(pick.iter().map(|&j| est[j]).collect())
            })
            .collect::<Result<_>>()?;
        if config.assignments == 1 {
            warn!("N = 1: sample variance reported as 0");
        }
        for (mi, method) in methods.iter().enumerate() {
            let column: Vec<f64> = per_draw.iter().map(|row| row[mi]).collect();
            out.metrics.push(ReplicateMetrics {
                replicate,
                gamma,
                method: method.clone(),
                metrics: CellMetrics::from_estimates(&column, inst.tau, inst.sigma_n2, n),
            });
        }
        for (k, row) in per_draw.iter().enumerate() {
            for (mi, &v) in row.iter().enumerate() {
                out.estimates.push((gi, k, mi, v));
            }
        }
    }
    Ok(out)
}

/// Median and 10/90% band of each stat across replicates.
pub fn summarize(config: &SimConfig, per_replicate: Vec<ReplicateMetrics>) -> MetricsSummary {
    let mut rows = Vec::new();
    for &gamma in &config.gamma_grid {
        for method in config.methods() {
            for stat in STATS {
                let mut vals: Vec<f64> = per_replicate
                    .iter()
                    .filter(|r| r.gamma == gamma && r.method == method)
                    .map(|r| r.metrics.get(stat))
                    .collect();
                vals.sort_by(f64::total_cmp);
                rows.push(MetricRow {
                    gamma,
                    method: method.clone(),
                    stat: stat.to_string(),
                    median: quantile(&vals, 0.5),
                    q10: quantile(&vals, 0.1),
                    q90: quantile(&vals, 0.9),
                });
            }
        }
    }
    MetricsSummary { rows, per_replicate }
}

/// Run every replicate in memory (no files).
pub fn run_in_memory(config: &SimConfig, weights: &WeightService) -> Result<MetricsSummary> {
    config.validate()?;
    let mut per = Vec::new();
    for r in 0..config.replicates {
        per.extend(run_replicate(config, r, weights)?.metrics);
    }
    Ok(summarize(config, per))
}

fn estimate_lines(config: &SimConfig, replicate: usize, out: &ReplicateOutput) -> String {
    let methods = config.methods();
    let gammas: Vec<String> = config.gamma_grid.iter().map(|g| format_float(*g)).collect();
    let mut s = String::new();
    for &(gi, k, mi, v) in &out.estimates {
        let _ = writeln!(s, "{replicate},{},{k},{},{}", gammas[gi], methods[mi], format_float(v));
    }
    s
}

fn metric_lines(out: &ReplicateOutput) -> String {
    let mut s = String::new();
    for m in &out.metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.replicate,
            format_float(m.gamma),
            m.method,
            format_float(m.metrics.normalized_abs_bias),
            format_float(m.metrics.normalized_variance),
            format_float(m.metrics.nrmse)
        );
    }
    s
}

fn parse_metric_lines(text: &str) -> Result<Vec<ReplicateMetrics>> {
    let bad = || Error::CacheCorrupt("malformed partial metrics".into());
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    text.lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(ReplicateMetrics {
                replicate: f[0].parse().map_err(|_| bad())?,
                gamma: num(f[1])?,
                method: f[2].to_string(),
                metrics: CellMetrics {
                    normalized_abs_bias: num(f[3])?,
                    normalized_variance: num(f[4])?,
                    nrmse: num(f[5])?,
                },
            })
        })
        .collect()
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentFiles {
    pub estimates: PathBuf,
    pub metrics: PathBuf,
}

/// Full experiment with CSV output in `out_dir`.
///
/// Each replicate is persisted under `out_dir/partial/` as soon as it
/// finishes; a rerun with the same config picks finished replicates up
/// from there instead of recomputing them.
pub fn run_experiment(config: &SimConfig, out_dir: &Path, weights: &WeightService) -> Result<(MetricsSummary, ExperimentFiles)> {
    config.validate()?;
    let partial = out_dir.join("partial");
    fs::create_dir_all(&partial)?;
    let header = format!("# {VERSION_LINE}\n# config {}\n", config.signature());

    let mut per = Vec::new();
    for r in 0..config.replicates {
        let est_path = partial.join(format!("replicate_{r:05}.estimates.csv"));
        let met_path = partial.join(format!("replicate_{r:05}.metrics.csv"));
        if let (Ok(e), Ok(m)) = (fs::read_to_string(&est_path), fs::read_to_string(&met_path)) {
            if e.starts_with(&header) && m.starts_with(&header) {
                if let Ok(metrics) = parse_metric_lines(&m) {
                    info!("replicate {r}: reusing partial results");
                    per.extend(metrics);
                    continue;
                }
            }
        }
        info!("replicate {r}: running");
        let out = run_replicate(config, r, weights)?;
        write_atomic(&est_path, &format!("{header}{}", estimate_lines(config, r, &out)))?;
        write_atomic(&met_path, &format!("{header}{}", metric_lines(&out)))?;
        per.extend(out.metrics);
    }

    let files = ExperimentFiles {
        estimates: out_dir.join("estimates.csv"),
        metrics: out_dir.join("metrics.csv"),
    };
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&files.estimates)?);
        writeln!(f, "# {VERSION_LINE}")?;
        writeln!(f, "replicate,gamma,assignment_id,method,estimate")?;
        for r in 0..config.replicates {
            let text = fs::read_to_string(partial.join(format!("replicate_{r:05}.estimates.csv")))?;
            let body = text.strip_prefix(&header).ok_or_else(|| Error::CacheCorrupt(format!("partial replicate {r}")))?;
            f.write_all(body.as_bytes())?;
        }
        f.flush()?;
    }
    let summary = summarize(config, per);
    write_metrics_csv(&files.metrics, &summary)?;
    Ok((summary, files))
}

pub fn write_metrics_csv(path: &Path, summary: &MetricsSummary) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "# {VERSION_LINE}")?;
    writeln!(f, "gamma,method,stat,median,q10,q90")?;
    for r in &summary.rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            format_float(r.gamma),
            r.method,
            r.stat,
            format_float(r.median),
            format_float(r.q10),
            format_float(r.q90)
        )?;
    }
    f.flush()?;
    Ok(())
}
