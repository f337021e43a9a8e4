//! Command implementations behind the `plsp` binary. Each command returns an
//! error instead of exiting so the binary can map failures to exit codes.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use plsp::gmm::{FitResult, StartTrace, LAMBDA_BOUND};
use plsp::simulation::{ReplicationRecord, SimulationReport};
use plsp::{
    build_knn_weights, fit, g_curve, run_replications, Bandwidth, Case, Dataset, Error, FitOptions, Method,
    ReplicationSummary, ScenarioConfig, ScoringConfig, WeightMatrix,
};

/// Version stamped on every JSON document written by the CLI.
pub const FORMAT_VERSION: u32 = 1;

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "PLSP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "plsp", version, about = "Partially linear spatial probit estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Monte Carlo replications of a simulation design.
    Simulate(SimulateArgs),
    /// Fit a model to a CSV data file.
    Fit(FitArgs),
    /// Evaluate the fitted nonparametric component on a grid.
    Gcurve(GcurveArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Design: 1 (nonlinear g, mixed regressors) or 2 (linear g, normal regressors).
    #[arg(long, value_parser = parse_case)]
    pub case: Case,
    /// True spatial parameter, strictly inside (-0.95, 0.95).
    #[arg(long, value_parser = parse_lambda, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200, value_parser = parse_n)]
    pub n: usize,
    #[arg(long, default_value_t = 50, value_parser = parse_reps)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated subset of plspm, plpm, lsaep.
    #[arg(long, value_delimiter = ',', default_value = "plspm,plpm,lsaep")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 6, value_parser = parse_k)]
    pub k_neighbors: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthChoice {
    Auto,
    Fixed(Bandwidth),
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub method: Method,
    #[arg(long, default_value_t = 6, value_parser = parse_k)]
    pub k_neighbors: usize,
    /// `auto` for cross-validation, or a positive number.
    #[arg(long, default_value = "auto", value_parser = parse_bandwidth)]
    pub bandwidth: BandwidthChoice,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub covariance: Toggle,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GcurveArgs {
    /// JSON written by `plsp fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `LO:HI:STEP`, endpoints included.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    pub grid: Grid,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

fn parse_case(s: &str) -> Result<Case, String> {
    let v: u8 = s.parse().map_err(|_| format!("`{s}` is not a case number"))?;
    Case::try_from(v).map_err(|e| e.to_string())
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(v.abs() < LAMBDA_BOUND) {
        return Err(format!("lambda must lie in (-{LAMBDA_BOUND}, {LAMBDA_BOUND}), got {v}"));
    }
    Ok(v)
}

fn parse_n(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("`{s}` is not a count"))?;
    if !(20..=3600).contains(&v) {
        return Err(format!("n must lie in [20, 3600], got {v}"));
    }
    Ok(v)
}

fn parse_reps(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("reps must be a positive integer, got `{s}`")),
    }
}

fn parse_k(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("k-neighbors must be a positive integer, got `{s}`")),
    }
}

fn parse_bandwidth(s: &str) -> Result<BandwidthChoice, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(BandwidthChoice::Auto);
    }
    let v: f64 = s.parse().map_err(|_| format!("bandwidth must be `auto` or a number, got `{s}`"))?;
    Bandwidth::new(v).map(BandwidthChoice::Fixed).map_err(|e| e.to_string())
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts[..] else {
        return Err(format!("grid must be LO:HI:STEP, got `{s}`"));
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number"));
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && step.is_finite() && hi >= lo) {
        return Err(format!("grid needs finite LO <= HI and STEP > 0, got `{s}`"));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > 1_000_000 {
        return Err(format!("grid has {count} points; use a coarser step"));
    }
    // Rounded so that printed grid values are the nominal ones (-1.9, not -1.9000000000000001).
    Ok(Grid((0..count).map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12).collect()))
}

/// Thread count requested through the environment, if any.
pub fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => bail!("{THREADS_ENV} must be a positive integer, got `{s}`"),
        },
        Err(_) => Ok(None),
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationDocument {
    pub format_version: u32,
    /// Seconds since the Unix epoch; the only field that varies between identical runs.
    pub generated_at: u64,
    pub config: ScenarioConfig,
    pub methods: Vec<Method>,
    pub records: Vec<ReplicationRecord>,
    pub summary: ReplicationSummary,
}

impl From<SimulationReport> for SimulationDocument {
    fn from(r: SimulationReport) -> Self {
        SimulationDocument {
            format_version: FORMAT_VERSION,
            generated_at: timestamp(),
            config: r.config,
            methods: r.methods,
            records: r.records,
            summary: r.summary,
        }
    }
}

/// Aligned `method x parameter` table of means, medians and standard deviations.
pub fn summary_table(summary: &ReplicationSummary, reps: usize) -> String {
    let mut out = format!("{:<7}{:<11}{:>11}{:>11}{:>11}\n", "method", "parameter", "mean", "median", "sd");
    for (method, s) in &summary.methods {
        for (name, st) in &s.parameters {
            out.push_str(&format!(
                "{:<7}{:<11}{:>11.4}{:>11.4}{:>11.4}\n",
                method.to_string(),
                name,
                st.mean,
                st.median,
                st.sd
            ));
        }
    }
    let failures: Vec<String> = summary
        .methods
        .iter()
        .map(|(m, s)| format!("{m} {}/{reps}", s.failures))
        .collect();
    out.push_str(&format!("failures: {}\n", failures.join(", ")));
    out
}

/// Runs the replications, writes the JSON document and prints the summary table.
pub fn cmd_simulate(args: &SimulateArgs, stdout: &mut dyn Write) -> anyhow::Result<SimulationDocument> {
    let mut cfg = ScenarioConfig::new(args.case, args.lambda, args.reps, args.seed);
    cfg.n = args.n;
    cfg.k_neighbors = args.k_neighbors;
    let report = run_replications(&cfg, &args.methods, &FitOptions::default())?;
    let doc = SimulationDocument::from(report);
    write_atomic(&args.out, &serde_json::to_vec_pretty(&doc)?)?;
    stdout.write_all(summary_table(&doc.summary, args.reps).as_bytes())?;
    Ok(doc)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub format_version: u32,
    pub k_neighbors: usize,
    #[serde(flatten)]
    pub fit: FitResult,
}

#[derive(Debug, Serialize)]
struct FitFailure<'a> {
    format_version: u32,
    method: Method,
    error: String,
    optimizer_trace: &'a [StartTrace],
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(Dataset::from_csv(BufReader::new(file))?)
}

fn weights_for(data: &Dataset, k: usize) -> anyhow::Result<WeightMatrix> {
    let coords = data
        .coordinates()
        .context("data file carries no sx, sy coordinates")?;
    Ok(build_knn_weights(coords, k, true)?)
}

/// Fits one model to a CSV file and writes the result document.
pub fn cmd_fit(args: &FitArgs) -> anyhow::Result<FitDocument> {
    let data = read_dataset(&args.data)?;
    let w = weights_for(&data, args.k_neighbors)?;
    let options = FitOptions {
        bandwidth: match args.bandwidth {
            BandwidthChoice::Auto => None,
            BandwidthChoice::Fixed(b) => Some(b),
        },
        covariance: args.covariance == Toggle::On,
        ..FitOptions::default()
    };
    match fit(args.method, &data, &w, &options) {
        Ok(result) => {
            let doc = FitDocument {
                format_version: FORMAT_VERSION,
                k_neighbors: args.k_neighbors,
                fit: result,
            };
            write_atomic(&args.out, &serde_json::to_vec_pretty(&doc)?)?;
            Ok(doc)
        }
        Err(Error::Fit { message, trace }) => {
            let failure = FitFailure {
                format_version: FORMAT_VERSION,
                method: args.method,
                error: message.clone(),
                optimizer_trace: &trace,
            };
            write_atomic(&args.out, &serde_json::to_vec_pretty(&failure)?)?;
            Err(Error::Fit { message, trace }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Re-solves the fitted `g` on a grid and writes `z,g_hat` rows; cells are
/// left empty where the point lies outside the data or the solve fails.
pub fn cmd_gcurve(args: &GcurveArgs) -> anyhow::Result<Vec<(f64, Option<f64>)>> {
    let file = File::open(&args.fit).with_context(|| format!("cannot open {}", args.fit.display()))?;
    let doc: FitDocument = serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("{} is not a fit document", args.fit.display()))?;
    if doc.format_version != FORMAT_VERSION {
        bail!("unsupported format_version {} (expected {FORMAT_VERSION})", doc.format_version);
    }
    let data = read_dataset(&args.data)?;
    if data.p() != doc.fit.beta.len() {
        bail!("fit has {} regressors but the data has {}", doc.fit.beta.len(), data.p());
    }
    let w = match doc.fit.method {
        Method::Plpm => None,
        _ => Some(weights_for(&data, doc.k_neighbors)?),
    };
    let values = g_curve(&doc.fit, &data, w.as_ref(), &args.grid.0, &ScoringConfig::default())?;
    let mut csv = String::from("z,g_hat\n");
    for (z, g) in args.grid.0.iter().zip(&values) {
        match g {
            Some(g) => csv.push_str(&format!("{z},{g}\n")),
            None => csv.push_str(&format!("{z},\n")),
        }
    }
    write_atomic(&args.out, csv.as_bytes())?;
    Ok(args.grid.0.iter().copied().zip(values).collect())
}

/// Per-method parameter values of every completed replication, in replication order.
pub fn estimates_by_method(records: &[ReplicationRecord]) -> BTreeMap<Method, Vec<BTreeMap<String, f64>>> {
    let mut out: BTreeMap<Method, Vec<BTreeMap<String, f64>>> = BTreeMap::new();
    for r in records {
        for (m, o) in &r.methods {
            if let Some(e) = &o.estimates {
                out.entry(*m).or_default().push(e.clone());
            }
        }
    }
    out
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, stdout).map(|_| ()),
        Command::Fit(a) => {
            let doc = cmd_fit(a)?;
            writeln!(stdout, "{}: q_min {:e}", doc.fit.method, doc.fit.q_min)?;
            for (name, v) in doc.fit.parameter_names.iter().zip(&doc.fit.estimates) {
                writeln!(stdout, "  {name:<8}{v:>11.4}")?;
            }
            Ok(())
        }
        Command::Gcurve(a) => {
            let rows = cmd_gcurve(a)?;
            let missing = rows.iter().filter(|r| r.1.is_none()).count();
            writeln!(stdout, "{} grid points written ({missing} outside the data)", rows.len())?;
            Ok(())
        }
    }
}
