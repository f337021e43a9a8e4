//! Simulation designs, the replication harness and summary statistics.
//!
//! Both designs draw `n` sites without replacement from a square integer
//! grid, build row-normalized k-nearest-neighbour weights on them, and
//! generate `Y = 1{X beta + g(Z) + U > 0}` with `U = (I - lambda W)^{-1} eps`
//! and `beta = (-1, 1)`.
//!
//! * Case 1: `X1 ~ Bernoulli(0.7)`, `X2 ~ U[-2, 2]`, `Z` a sum of 48
//!   `U[-0.25, 0.25]` draws, `g(t) = t + 2 cos(pi t / 2)`.
//! * Case 2: `X1, X2, Z ~ N(0, 1)`, `g(t) = 1 + t / 2`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{fit_lsaep, fit_plpm, fit_plspm, FitOptions, Method, LAMBDA_BOUND};
use crate::kernel::select_bandwidth;
use crate::par;
use crate::spatial::{build_knn_weights, simulate_sar_errors, Coordinates, WeightMatrix};

/// True regression coefficients of both designs.
pub const TRUE_BETA: [f64; 2] = [-1.0, 1.0];

/// Failure share above which a replication run is rejected.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Case {
    /// Mixed covariates, nonlinear `g`.
    One,
    /// Gaussian covariates, linear `g`.
    Two,
}

impl Case {
    /// The true nonparametric component.
    pub fn g(self, t: f64) -> f64 {
        match self {
            Case::One => t + 2.0 * (FRAC_PI_2 * t).cos(),
            Case::Two => 1.0 + 0.5 * t,
        }
    }
}

impl TryFrom<u8> for Case {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Case::One),
            2 => Ok(Case::Two),
            other => Err(Error::Config(format!("case must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Case> for u8 {
    fn from(c: Case) -> u8 {
        match c {
            Case::One => 1,
            Case::Two => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub case: Case,
    pub lambda_true: f64,
    pub n: usize,
    pub reps: usize,
    pub k_neighbors: usize,
    pub grid_side: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    /// The published design: `n = 200`, 6 neighbours on a 60 x 60 grid.
    pub fn new(case: Case, lambda_true: f64, reps: usize, seed: u64) -> Self {
        ScenarioConfig {
            case,
            lambda_true,
            n: 200,
            reps,
            k_neighbors: 6,
            grid_side: 60,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_true.abs() < LAMBDA_BOUND) {
            return Err(Error::Config(format!(
                "lambda must lie in (-{LAMBDA_BOUND}, {LAMBDA_BOUND}), got {}",
                self.lambda_true
            )));
        }
        if self.n > self.grid_side * self.grid_side {
            return Err(Error::Config(format!("n = {} exceeds the {}^2 grid sites", self.n, self.grid_side)));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.k_neighbors == 0 || self.k_neighbors >= self.n {
            return Err(Error::Config(format!("k = {} neighbours needs 0 < k < n = {}", self.k_neighbors, self.n)));
        }
        Ok(())
    }

    /// Independent random stream for replication `rep`.
    pub fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// Draws replication `rep`: sites, weights, covariates and responses.
pub fn generate_scenario(cfg: &ScenarioConfig, rep: usize) -> Result<(Dataset, WeightMatrix)> {
    cfg.validate()?;
    let mut rng = cfg.rng(rep);
    let n = cfg.n;
    let side = cfg.grid_side;
    let sites: Vec<[f64; 2]> = sample(&mut rng, side * side, n)
        .into_iter()
        .map(|s| [(s % side) as f64, (s / side) as f64])
        .collect();
    let coords = Coordinates::new(sites)?;
    let w = build_knn_weights(&coords, cfg.k_neighbors, true)?;

    let mut x = Vec::with_capacity(2 * n);
    let mut z = Vec::with_capacity(n);
    match cfg.case {
        Case::One => {
            let bern = Bernoulli::new(0.7).expect("valid probability");
            let wide = Uniform::new_inclusive(-2.0, 2.0).expect("valid range");
            let narrow = Uniform::new_inclusive(-0.25, 0.25).expect("valid range");
            for _ in 0..n {
                x.push(if rng.sample(bern) { 1.0 } else { 0.0 });
                x.push(rng.sample(wide));
                z.push((0..48).map(|_| rng.sample(narrow)).sum());
            }
        }
        Case::Two => {
            for _ in 0..n {
                x.push(rng.sample(StandardNormal));
                x.push(rng.sample(StandardNormal));
                z.push(rng.sample(StandardNormal));
            }
        }
    }
    let u = simulate_sar_errors(&w, cfg.lambda_true, &mut rng)?;
    let y = (0..n)
        .map(|i| TRUE_BETA[0] * x[2 * i] + TRUE_BETA[1] * x[2 * i + 1] + cfg.case.g(z[i]) + u[i] > 0.0)
        .collect();
    Ok((Dataset::new(y, x, 2, z)?.with_coordinates(coords)?, w))
}

/// Mean, median (midpoint for even counts) and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
}

/// Columnwise summaries of a set of estimate vectors.
pub fn summarize(estimates: &[Vec<f64>]) -> Result<Vec<Stat>> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Contract("cannot summarize an empty set of estimates".into()))?;
    let d = first.len();
    if estimates.iter().any(|e| e.len() != d) {
        return Err(Error::Contract("estimate vectors differ in length".into()));
    }
    let m = estimates.len() as f64;
    Ok((0..d)
        .map(|k| {
            let mut col: Vec<f64> = estimates.iter().map(|e| e[k]).collect();
            col.sort_by(f64::total_cmp);
            let mean = col.iter().sum::<f64>() / m;
            let mid = col.len() / 2;
            let median = if col.len() % 2 == 1 { col[mid] } else { 0.5 * (col[mid - 1] + col[mid]) };
            let sd = if col.len() > 1 {
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            Stat { mean, median, sd }
        })
        .collect())
}

/// One method's outcome on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimates: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    pub methods: BTreeMap<Method, MethodOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub completed: usize,
    pub failures: usize,
    pub parameters: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub methods: BTreeMap<Method, MethodSummary>,
}

impl ReplicationSummary {
    pub fn stat(&self, method: Method, parameter: &str) -> Option<Stat> {
        self.methods.get(&method)?.parameters.get(parameter).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: ScenarioConfig,
    pub methods: Vec<Method>,
    pub records: Vec<ReplicationRecord>,
    pub summary: ReplicationSummary,
}

fn run_one(cfg: &ScenarioConfig, rep: usize, methods: &[Method], options: &FitOptions) -> ReplicationRecord {
    let mut record = ReplicationRecord {
        rep,
        bandwidth: None,
        methods: BTreeMap::new(),
    };
    let (data, w) = match generate_scenario(cfg, rep) {
        Ok(d) => d,
        Err(e) => {
            for &m in methods {
                record.methods.insert(m, failed(&e));
            }
            return record;
        }
    };
    let needs_bandwidth = methods.iter().any(|&m| m != Method::Lsaep);
    let bandwidth = match options.bandwidth {
        Some(b) => Ok(b),
        None if needs_bandwidth => select_bandwidth(&data),
        None => Err(Error::Contract("no bandwidth needed".into())),
    };
    record.bandwidth = bandwidth.as_ref().ok().map(|b| b.value());
    for &m in methods {
        let outcome = match (m, &bandwidth) {
            (Method::Lsaep, _) => fit_lsaep(&data, &w, options),
            (_, Err(e)) => Err(e.clone()),
            (_, Ok(b)) => {
                let opts = FitOptions {
                    bandwidth: Some(*b),
                    ..options.clone()
                };
                if m == Method::Plspm {
                    fit_plspm(&data, &w, &opts)
                } else {
                    fit_plpm(&data, &opts)
                }
            }
        };
        let entry = match outcome {
            Ok(fit) => MethodOutcome {
                estimates: Some(fit.parameter_names.iter().cloned().zip(fit.estimates.iter().copied()).collect()),
                q_min: Some(fit.q_min),
                error: None,
            },
            Err(e) => failed(&e),
        };
        record.methods.insert(m, entry);
    }
    record
}

fn failed(e: &Error) -> MethodOutcome {
    MethodOutcome {
        estimates: None,
        q_min: None,
        error: Some(e.to_string()),
    }
}

/// Summaries per method over the completed replications.
pub fn summarize_records(records: &[ReplicationRecord], methods: &[Method]) -> Result<ReplicationSummary> {
    let mut out = BTreeMap::new();
    for &m in methods {
        let done: Vec<&BTreeMap<String, f64>> = records
            .iter()
            .filter_map(|r| r.methods.get(&m).and_then(|o| o.estimates.as_ref()))
            .collect();
        let failures = records.len() - done.len();
        let mut parameters = BTreeMap::new();
        if let Some(first) = done.first() {
            let names: Vec<&String> = first.keys().collect();
            let rows: Vec<Vec<f64>> = done.iter().map(|e| names.iter().map(|k| e[*k]).collect()).collect();
            for (name, stat) in names.into_iter().zip(summarize(&rows)?) {
                parameters.insert(name.clone(), stat);
            }
        }
        out.insert(
            m,
            MethodSummary {
                completed: done.len(),
                failures,
                parameters,
            },
        );
    }
    Ok(ReplicationSummary { methods: out })
}

/// Runs `cfg.reps` replications (concurrently when enabled) and summarizes.
/// Results are identical for any thread count.
pub fn run_replications(cfg: &ScenarioConfig, methods: &[Method], options: &FitOptions) -> Result<SimulationReport> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no estimation method requested".into()));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let records = par::map_indexed_with(options.execution, cfg.reps, |r| run_one(cfg, r, &methods, options));
    let summary = summarize_records(&records, &methods)?;
    for (m, s) in &summary.methods {
        if s.failures as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
            return Err(Error::Harness {
                method: m.to_string(),
                failures: s.failures,
                reps: cfg.reps,
            });
        }
    }
    Ok(SimulationReport {
        config: cfg.clone(),
        methods,
        records,
        summary,
    })
}
