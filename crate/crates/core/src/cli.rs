//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DMatrix;
use rand::Rng;

use crate::design_matrix::{normalize, read_covariates_csv, winsorize, write_covariates_csv, NormalizedDesign, RawCovariates};
use crate::envelopes::{coverage, envelope_report};
use crate::error::{Error, Result};
use crate::estimators::{estimate_all, method_names, population_ols, Assignment, CorrectionWeights, ObservedData};
use crate::folding::{scalar_expectation, GramContext};
use crate::format_float;
use crate::oracle::{exact_expectation, exact_weight, OracleBudget};
use crate::sampling::substream;
use crate::simulation::{run_experiment, worst_case_residual, SimConfig, VERSION_LINE};
use crate::weights::WeightService;

#[derive(Debug, Parser)]
#[command(name = "neumann-ra", version, about = "Neumann-corrected regression adjustment for randomized experiments")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Weight cache directory (falls back to $NEUMANN_RA_WEIGHTS_CACHE).
    #[arg(long, global = true)]
    pub weights_cache: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Center and whiten a covariate CSV.
    Normalize(NormalizeArgs),
    /// Compute Neumann weights ξ for one sample size.
    Weights(WeightsArgs),
    /// Estimate the ATE from observed outcomes and an assignment column.
    Estimate(EstimateArgs),
    /// Run the Monte-Carlo experiment.
    Simulate(SimulateArgs),
    /// Compare the engine against exhaustive enumeration on small designs.
    OracleCheck(OracleArgs),
    /// Concentration-envelope diagnostics.
    Envelope(EnvelopeArgs),
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Winsorize each column at these quantiles first, e.g. `0.01,0.99`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub winsorize: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub m: usize,
    /// CSV dump of ξ for degrees 0..=d.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub design: PathBuf,
    /// CSV with columns `y` and `treated` (0/1).
    #[arg(long)]
    pub data: PathBuf,
    /// Highest correction degree; omit for dim and ols only.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 8)]
    pub max_n: usize,
    #[arg(long, default_value_t = 2)]
    pub max_d: usize,
    /// Covariate CSV to check instead of random designs.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct EnvelopeArgs {
    #[arg(long)]
    pub design: PathBuf,
    /// CSV with potential outcomes `y1`, `y0`; default is the worst-case residual pair.
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    /// Treated-arm size.
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    /// Monte-Carlo draws for the empirical coverage check.
    #[arg(long, default_value_t = 0)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Parse, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    if let Some(k) = cli.threads {
        // a pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build_global();
    }
    let cache = WeightService::from_flag_or_env(cli.weights_cache.as_deref());
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Normalize(a) => run_normalize(a, &mut out),
        Command::Weights(a) => run_weights(a, &cache, &mut out),
        Command::Estimate(a) => run_estimate(a, &cache, &mut out),
        Command::Simulate(a) => run_simulate(a, &cache, &mut out),
        Command::OracleCheck(a) => run_oracle(a, &mut out),
        Command::Envelope(a) => run_envelope(a, &mut out),
    }
}

fn load_design(path: &Path) -> Result<NormalizedDesign> {
    normalize(&read_covariates_csv(path)?)
}

fn run_normalize(a: &NormalizeArgs, out: &mut dyn Write) -> Result<i32> {
    let mut raw = read_covariates_csv(&a.input)?;
    if let Some(q) = &a.winsorize {
        raw = winsorize(&raw, q[0], q[1])?;
    }
    let design = normalize(&raw)?;
    write_covariates_csv(&a.output, design.matrix(), Some(VERSION_LINE))?;
    let check = design.check();
    writeln!(out, "n={}", design.n())?;
    writeln!(out, "p={}", design.p())?;
    writeln!(out, "max_column_sum={}", format_float(check.max_column_sum))?;
    writeln!(out, "max_gram_deviation={}", format_float(check.max_gram_deviation))?;
    writeln!(out, "passes={}", check.passes(design.n()))?;
    Ok(0)
}

fn run_weights(a: &WeightsArgs, cache: &WeightService, out: &mut dyn Write) -> Result<i32> {
    let design = load_design(&a.design)?;
    let ctx = GramContext::new(&design);
    let ladder = cache.ladder(&ctx, a.m, a.d)?;
    let mut text = format!("# {VERSION_LINE}\nunit");
    for w in &ladder {
        text.push_str(&format!(",xi_d{}", w.d));
    }
    text.push('\n');
    for i in 0..design.n() {
        text.push_str(&i.to_string());
        for w in &ladder {
            text.push(',');
            text.push_str(&format_float(w.xi[i]));
        }
        text.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(0)
}

/// Reads `y` and `treated` columns.
fn read_observed(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("{}: missing column '{name}'", path.display())))
    };
    let (iy, it) = (col("y")?, col("treated")?);
    let (mut y, mut t) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |k: usize| {
            rec[k]
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number '{}'", &rec[k])))
        };
        y.push(parse(iy)?);
        t.push(match &rec[it] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::InvalidInput(format!("treated must be 0/1, got '{other}'"))),
        });
    }
    Ok((y, t))
}

fn read_potential(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("{}: missing column '{name}'", path.display())))
    };
    let (i1, i0) = (col("y1")?, col("y0")?);
    let (mut y1, mut y0) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad number '{}'", &rec[k])));
        y1.push(num(i1)?);
        y0.push(num(i0)?);
    }
    Ok((y1, y0))
}

fn run_estimate(a: &EstimateArgs, cache: &WeightService, out: &mut dyn Write) -> Result<i32> {
    let design = load_design(&a.design)?;
    let (y, flags) = read_observed(&a.data)?;
    let assignment = Assignment::from_flags(&flags)?;
    let weights = match a.d {
        Some(d) => {
            let ctx = GramContext::new(&design);
            Some(CorrectionWeights {
                arm1: cache.ladder(&ctx, assignment.n1(), d)?,
                arm0: cache.ladder(&ctx, assignment.n0(), d)?,
            })
        }
        None => None,
    };
    let observed = ObservedData::new(&design, assignment, y)?;
    let estimates = estimate_all(&observed, weights.as_ref())?;
    let mut text = format!("# {VERSION_LINE}\nmethod,estimate\n");
    for (name, v) in method_names(a.d).iter().zip(&estimates) {
        text.push_str(&format!("{name},{}\n", format_float(*v)));
    }
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(0)
}

fn run_simulate(a: &SimulateArgs, cache: &WeightService, out: &mut dyn Write) -> Result<i32> {
    let mut config = SimConfig::from_path(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let (_, files) = run_experiment(&config, &a.out_dir, cache)?;
    writeln!(out, "estimates={}", files.estimates.display())?;
    writeln!(out, "metrics={}", files.metrics.display())?;
    Ok(0)
}

fn random_design(n: usize, p: usize, seed: u64) -> Result<NormalizedDesign> {
    let mut rng = substream(seed, n as u64);
    let raw = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    normalize(&RawCovariates::new(raw)?)
}

fn run_oracle(a: &OracleArgs, out: &mut dyn Write) -> Result<i32> {
    let budget = OracleBudget::default();
    let designs: Vec<NormalizedDesign> = match &a.design {
        Some(p) => vec![load_design(p)?],
        None => (4..=a.max_n).map(|n| random_design(n, 2.min(n - 2), a.seed)).collect::<Result<_>>()?,
    };
    writeln!(out, "n,m,d,max_weight_dev,scalar_dev,status")?;
    let mut failed = 0usize;
    for design in &designs {
        let n = design.n();
        if n > a.max_n {
            return Err(Error::InvalidInput(format!("design has n = {n} > --max-n {}", a.max_n)));
        }
        let ctx = GramContext::new(design);
        let mut rng = substream(a.seed, 1000 + n as u64);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = population_ols(design, &y)?.residuals;
        for m in 1..=n {
            for d in 0..=a.max_d {
                let engine = crate::folding::neumann_weights(d, m, &ctx)?;
                let mut dev: f64 = 0.0;
                for i in 0..n {
                    dev = dev.max((engine.xi[i] - exact_weight(d, m, design, i, &budget)?).abs());
                }
                let scalar = scalar_expectation(d, m, &ctx, &r)?;
                let sdev = (scalar - exact_expectation(d, m, design, &r, &budget)?).abs();
                let ok = dev <= a.tolerance && sdev <= a.tolerance;
                if !ok {
                    failed += 1;
                }
                writeln!(
                    out,
                    "{n},{m},{d},{},{},{}",
                    format_float(dev),
                    format_float(sdev),
                    if ok { "pass" } else { "FAIL" }
                )?;
            }
        }
    }
    info!("oracle check finished with {failed} failures");
    if failed > 0 {
        eprintln!("error: kind=oracle_mismatch message={failed} configurations exceed tolerance {}", a.tolerance);
        return Ok(1);
    }
    Ok(0)
}

fn run_envelope(a: &EnvelopeArgs, out: &mut dyn Write) -> Result<i32> {
    let design = load_design(&a.design)?;
    let (r1, r0) = match &a.outcomes {
        Some(p) => {
            let (y1, y0) = read_potential(p)?;
            (population_ols(&design, &y1)?.residuals, population_ols(&design, &y0)?.residuals)
        }
        None => {
            let e = worst_case_residual(&design)?;
            (e.iter().map(|v| 3.0 * v).collect(), e)
        }
    };
    let mut report = envelope_report(&design, &r1, &r0, a.m, a.delta, a.d)?;
    if a.draws > 0 {
        let (arm, env) = report
            .arms
            .iter()
            .find(|(arm, _)| *arm == report.worst_arm)
            .cloned()
            .expect("worst arm present");
        let r = if arm == 1 { &r1 } else { &r0 };
        report.coverage = Some(coverage(&design, r, &env, a.draws, a.seed)?);
    }
    out.write_all(report.to_text().as_bytes())?;
    Ok(0)
}
