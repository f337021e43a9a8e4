//! GMM estimation of `theta = (beta, lambda)` from instrument-weighted
//! generalized residuals, with the nonparametric component profiled out.
//!
//! Three estimators share the machinery:
//!
//! * `Plspm`: partially linear probit with SAR errors (the full model);
//! * `Plpm`: the same profile estimator with `lambda` fixed at 0;
//! * `Lsaep`: a linear-index SAR probit where `g(z) = gamma0 + gamma1 z`.
//!
//! The weight matrix is the identity throughout, so the criterion is
//! `Q(theta) = |S(theta)|^2` with `S = n^{-1} xi' U~`.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, ols_no_intercept, select_bandwidth, Bandwidth};
use crate::optimize::{nelder_mead, Bounds, NelderMeadConfig};
use crate::par::{self, Execution};
use crate::probit::{adjusted_response, residual_at};
use crate::profile::{ProfileContext, ProfileFit, ScoringConfig};
use crate::spatial::{sar_variance, SarVariance, WeightMatrix};

/// Admissible range of the spatial parameter is `[-LAMBDA_BOUND, LAMBDA_BOUND]`.
pub const LAMBDA_BOUND: f64 = 0.95;

/// Estimates with `|lambda| >= LAMBDA_PINNED` are flagged as boundary solutions.
pub const LAMBDA_PINNED: f64 = 0.949;

/// Largest accepted condition number of `B2` in the sandwich covariance.
pub const MAX_B2_CONDITION: f64 = 1e10;

/// Parametric component `(beta, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub lambda: f64,
}

impl Theta {
    pub fn new(beta: Vec<f64>, lambda: f64) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) || !lambda.is_finite() {
            return Err(Error::Domain("theta entries must be finite".into()));
        }
        if lambda.abs() > LAMBDA_BOUND {
            return Err(Error::Domain(format!("lambda = {lambda} outside [-{LAMBDA_BOUND}, {LAMBDA_BOUND}]")));
        }
        Ok(Theta { beta, lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Plspm,
    Plpm,
    Lsaep,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Plspm, Method::Plpm, Method::Lsaep];

    pub fn is_spatial(self) -> bool {
        self != Method::Plpm
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Plspm => "PLSPM",
            Method::Plpm => "PLPM",
            Method::Lsaep => "LSAEP",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plspm" => Ok(Method::Plspm),
            "plpm" => Ok(Method::Plpm),
            "lsaep" => Ok(Method::Lsaep),
            other => Err(Error::Config(format!("unknown method `{other}` (expected plspm, plpm or lsaep)"))),
        }
    }
}

/// Moment vector and criterion value at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentValue {
    pub s: Vec<f64>,
    pub q_value: f64,
}

impl MomentValue {
    fn from_moments(s: Vec<f64>) -> Result<Self> {
        let q_value: f64 = s.iter().map(|v| v * v).sum();
        if q_value.is_nan() {
            return Err(Error::Numerical("criterion value is NaN".into()));
        }
        Ok(MomentValue { s, q_value })
    }
}

/// Kernel weights between every pair of sample points, row `i` centred at `Z_i`.
struct KernelMatrix {
    n: usize,
    k: Vec<f64>,
}

impl KernelMatrix {
    fn new(z: &[f64], b: Bandwidth) -> Self {
        let n = z.len();
        let inv_b = 1.0 / b.value();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = gaussian_kernel(0.0);
            for j in 0..i {
                let w = gaussian_kernel((z[i] - z[j]) * inv_b);
                k[i * n + j] = w;
                k[j * n + i] = w;
            }
        }
        KernelMatrix { n, k }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.k[i * self.n..(i + 1) * self.n]
    }
}

/// Residuals, instruments and fitted `g` at one parameter vector.
struct Evaluation {
    residuals: Vec<f64>,
    instruments: DMatrix<f64>,
    g_hat: Vec<f64>,
    unconverged: usize,
}

impl Evaluation {
    fn moments(&self) -> Vec<f64> {
        let n = self.residuals.len() as f64;
        self.instruments
            .column_iter()
            .map(|c| c.iter().zip(&self.residuals).map(|(a, u)| a * u).sum::<f64>() / n)
            .collect()
    }
}

/// A parameterized moment model the optimizer and covariance code can drive.
trait MomentModel: Sync {
    fn names(&self) -> Vec<String>;
    fn bounds(&self) -> Bounds;
    fn evaluate(&self, params: &[f64]) -> Result<Evaluation>;
    fn dim(&self) -> usize {
        self.names().len()
    }
}

fn beta_names(p: usize) -> impl Iterator<Item = String> {
    (1..=p).map(|k| format!("beta{k}"))
}

/// Profile (semiparametric) model; `w = None` fixes `lambda = 0`.
struct ProfileModel<'a> {
    data: &'a Dataset,
    w: Option<&'a WeightMatrix>,
    kernel: KernelMatrix,
    scoring: ScoringConfig,
    execution: Execution,
    beta_bound: f64,
}

impl<'a> ProfileModel<'a> {
    fn new(data: &'a Dataset, w: Option<&'a WeightMatrix>, b: Bandwidth, options: &FitOptions) -> Result<Self> {
        options.scoring.validate()?;
        if let Some(w) = w {
            check_weights(data, w)?;
        }
        Ok(ProfileModel {
            data,
            w,
            kernel: KernelMatrix::new(data.z(), b),
            scoring: options.scoring,
            execution: options.execution,
            beta_bound: options.beta_bound,
        })
    }

    fn theta(&self, params: &[f64]) -> Theta {
        let p = self.data.p();
        Theta {
            beta: params[..p].to_vec(),
            lambda: if self.w.is_some() { params[p] } else { 0.0 },
        }
    }

    fn sar(&self, lambda: f64) -> Result<SarVariance> {
        match self.w {
            Some(w) => sar_variance(w, lambda),
            None => Ok(SarVariance::independent(self.data.n())),
        }
    }

    fn profiles(&self, ctx: &ProfileContext<'_>) -> Result<Vec<ProfileFit>> {
        let z = self.data.z();
        par::map_indexed_with(self.execution, self.data.n(), |i| {
            ctx.solve(z[i], self.kernel.row(i), &self.scoring).map_err(|e| Error::Profile {
                index: i,
                source: Box::new(e),
            })
        })
        .into_iter()
        .collect()
    }
}

impl MomentModel for ProfileModel<'_> {
    fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = beta_names(self.data.p()).collect();
        if self.w.is_some() {
            names.push("lambda".into());
        }
        names
    }

    fn bounds(&self) -> Bounds {
        let p = self.data.p();
        let mut lower = vec![-self.beta_bound; p];
        let mut upper = vec![self.beta_bound; p];
        if self.w.is_some() {
            lower.push(-LAMBDA_BOUND);
            upper.push(LAMBDA_BOUND);
        }
        Bounds { lower, upper }
    }

    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        let theta = self.theta(params);
        let sv = self.sar(theta.lambda)?;
        let ctx = ProfileContext::new(&theta, self.data, &sv)?;
        let profiles = self.profiles(&ctx)?;
        let residuals = residuals_at(self.data, ctx.linear_index(), &profiles, &sv);
        let instruments = build_instruments(&theta, &profiles, self.data, &sv, self.w.is_some())?;
        Ok(Evaluation {
            residuals,
            instruments,
            g_hat: profiles.iter().map(|f| f.eta).collect(),
            unconverged: profiles.iter().filter(|f| !f.converged).count(),
        })
    }
}

/// Linear-index SAR probit: parameters `(beta, gamma0, gamma1, lambda)`.
struct LinearModel<'a> {
    data: &'a Dataset,
    w: &'a WeightMatrix,
    beta_bound: f64,
}

impl MomentModel for LinearModel<'_> {
    fn names(&self) -> Vec<String> {
        beta_names(self.data.p()).chain(["gamma0", "gamma1", "lambda"].map(String::from)).collect()
    }

    fn bounds(&self) -> Bounds {
        let d = self.data.p() + 2;
        let mut lower = vec![-self.beta_bound; d];
        let mut upper = vec![self.beta_bound; d];
        lower.push(-LAMBDA_BOUND);
        upper.push(LAMBDA_BOUND);
        Bounds { lower, upper }
    }

    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        let data = self.data;
        let (n, p) = (data.n(), data.p());
        let (g0, g1, lambda) = (params[p], params[p + 1], params[p + 2]);
        let sv = sar_variance(self.w, lambda)?;
        let xb = data.linear_index(&params[..p]);
        let z = data.z();
        let mut residuals = Vec::with_capacity(n);
        let mut g_hat = Vec::with_capacity(n);
        let mut xi = DMatrix::<f64>::zeros(n, p + 3);
        for i in 0..n {
            let gi = g0 + g1 * z[i];
            let index = xb[i] + gi;
            let iv = 1.0 / sv.v[i];
            let g = index * iv;
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite index at observation {i}")));
            }
            residuals.push(residual_at(g, data.y()[i]));
            g_hat.push(gi);
            for (k, x) in data.x_row(i).iter().enumerate() {
                xi[(i, k)] = x * iv;
            }
            xi[(i, p)] = iv;
            xi[(i, p + 1)] = z[i] * iv;
            xi[(i, p + 2)] = -sv.v_prime[i] * iv * iv * index;
        }
        Ok(Evaluation {
            residuals,
            instruments: xi,
            g_hat,
            unconverged: 0,
        })
    }
}

fn check_weights(data: &Dataset, w: &WeightMatrix) -> Result<()> {
    if w.n() != data.n() {
        return Err(Error::Contract(format!("weight matrix is {0}x{0} for {1} observations", w.n(), data.n())));
    }
    Ok(())
}

fn residuals_at(data: &Dataset, xb: &[f64], profiles: &[ProfileFit], sv: &SarVariance) -> Vec<f64> {
    let y = data.y();
    (0..data.n())
        .map(|i| residual_at((xb[i] + profiles[i].eta) / sv.v[i], y[i]))
        .collect()
}

fn build_instruments(
    theta: &Theta,
    profiles: &[ProfileFit],
    data: &Dataset,
    sv: &SarVariance,
    with_lambda: bool,
) -> Result<DMatrix<f64>> {
    let (n, p) = (data.n(), data.p());
    if profiles.len() != n || sv.len() != n || theta.beta.len() != p {
        return Err(Error::Contract(format!(
            "instrument inputs disagree: {} profiles, {} scales, {} coefficients for n = {n}, p = {p}",
            profiles.len(),
            sv.len(),
            theta.beta.len()
        )));
    }
    if let Some(bad) = profiles.iter().position(|f| f.grad_beta.len() != p) {
        return Err(Error::Contract(format!("profile {bad} has a gradient of the wrong length")));
    }
    let q = if with_lambda { p + 1 } else { p };
    let mut xi = DMatrix::<f64>::zeros(n, q);
    for i in 0..n {
        let f = &profiles[i];
        let iv = 1.0 / sv.v[i];
        let x = data.x_row(i);
        for k in 0..p {
            xi[(i, k)] = (x[k] + f.grad_beta[k]) * iv;
        }
        if with_lambda {
            let index = crate::data::dot(x, &theta.beta) + f.eta;
            xi[(i, p)] = -sv.v_prime[i] * iv * iv * index + f.grad_lambda * iv;
        }
    }
    Ok(xi)
}

/// Instrument matrix (`n x (p+1)`): the total derivative of each latent
/// index in `theta`, including the path through the profiled `g`.
pub fn instruments(theta: &Theta, profiles: &[ProfileFit], data: &Dataset, sv: &SarVariance) -> Result<DMatrix<f64>> {
    build_instruments(theta, profiles, data, sv, true)
}

/// Moment vector and criterion of the full model at `theta`.
pub fn moment_vector(
    theta: &Theta,
    data: &Dataset,
    w: &WeightMatrix,
    b: Bandwidth,
    cfg: &ScoringConfig,
) -> Result<MomentValue> {
    let options = FitOptions {
        scoring: *cfg,
        ..FitOptions::default()
    };
    moment_vector_with(theta, data, w, b, &options)
}

/// As [`moment_vector`], with scoring settings and execution mode taken from `options`.
pub fn moment_vector_with(
    theta: &Theta,
    data: &Dataset,
    w: &WeightMatrix,
    b: Bandwidth,
    options: &FitOptions,
) -> Result<MomentValue> {
    let model = ProfileModel::new(data, Some(w), b, options)?;
    let mut params = theta.beta.clone();
    params.push(theta.lambda);
    MomentValue::from_moments(model.evaluate(&params)?.moments())
}

/// Moment vector of the non-spatial profile estimator (`lambda = 0`, `q = p`).
pub fn moment_vector_nonspatial(beta: &[f64], data: &Dataset, b: Bandwidth, cfg: &ScoringConfig) -> Result<MomentValue> {
    let options = FitOptions {
        scoring: *cfg,
        ..FitOptions::default()
    };
    let model = ProfileModel::new(data, None, b, &options)?;
    MomentValue::from_moments(model.evaluate(beta)?.moments())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Fixed bandwidth; selected from the data when absent.
    pub bandwidth: Option<Bandwidth>,
    pub scoring: ScoringConfig,
    pub optimizer: NelderMeadConfig,
    /// Compute the sandwich covariance after fitting.
    pub covariance: bool,
    /// Box half-width for `beta` (and the linear `g` coefficients).
    pub beta_bound: f64,
    /// Starting values of `lambda` for the multistart.
    pub lambda_starts: Vec<f64>,
    pub execution: Execution,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bandwidth: None,
            scoring: ScoringConfig::default(),
            optimizer: NelderMeadConfig::default(),
            covariance: false,
            beta_bound: 10.0,
            lambda_starts: vec![0.0, 0.4, -0.4],
            execution: Execution::Parallel,
        }
    }
}

/// One optimizer run of the multistart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub q: Option<f64>,
    pub evaluations: usize,
    pub converged: bool,
    /// Criterion evaluations that failed (counted as `+inf`).
    pub failed_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub parameter_names: Vec<String>,
    pub estimates: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// `(gamma0, gamma1)` of the linear `g` for the linear-index baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_g: Option<[f64; 2]>,
    pub q_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<Bandwidth>,
    pub g_hat_at_sample: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_error: Option<String>,
    pub converged: bool,
    pub lambda_pinned: bool,
    /// Profile solves at the optimum that hit the iteration cap.
    pub unconverged_profiles: usize,
    pub optimizer_trace: Vec<StartTrace>,
}

impl FitResult {
    /// `theta` with `lambda = 0` for the non-spatial estimator.
    pub fn theta_hat(&self) -> Theta {
        Theta {
            beta: self.beta.clone(),
            lambda: self.lambda.unwrap_or(0.0),
        }
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.parameter_names.iter().position(|n| n == name).map(|k| self.estimates[k])
    }
}

fn minimize_model(model: &dyn MomentModel, starts: &[Vec<f64>], steps: &[f64], options: &FitOptions) -> Result<(Vec<f64>, Vec<StartTrace>)> {
    let bounds = model.bounds();
    let lambda_at = model.names().iter().position(|n| n == "lambda");
    let mut traces = Vec::with_capacity(starts.len());
    let mut ends: Vec<(f64, Vec<f64>)> = Vec::new();
    for start in starts {
        let mut failed = 0usize;
        let m = nelder_mead(
            |x| match model.evaluate(x) {
                Ok(ev) => MomentValue::from_moments(ev.moments()).map(|m| m.q_value).unwrap_or(f64::INFINITY),
                Err(_) => {
                    failed += 1;
                    f64::INFINITY
                }
            },
            start,
            steps,
            &bounds,
            &options.optimizer,
        )?;
        let finite = m.f.is_finite();
        traces.push(StartTrace {
            start: start.clone(),
            end: m.x.clone(),
            q: finite.then_some(m.f),
            evaluations: m.evaluations,
            converged: m.converged,
            failed_evaluations: failed,
        });
        if finite {
            ends.push((m.f, m.x));
        }
    }
    let Some(q_best) = ends.iter().map(|e| e.0).min_by(f64::total_cmp) else {
        return Err(Error::Fit {
            message: format!("no start produced a finite criterion ({} starts tried)", starts.len()),
            trace: traces,
        });
    };
    // Ends within the optimizer's resolution of the best are ties. The
    // lambda moment vanishes identically at lambda = 0, so a root there
    // carries no information about lambda; ties go to the end farthest from it.
    let tied = ends.iter().filter(|e| e.0 <= q_best + options.optimizer.f_tol);
    let chosen = match lambda_at {
        Some(k) => tied.fold(None::<&(f64, Vec<f64>)>, |acc, e| match acc {
            Some(a) if a.1[k].abs() >= e.1[k].abs() => Some(a),
            _ => Some(e),
        }),
        None => tied.min_by(|a, b| a.0.total_cmp(&b.0)),
    };
    let x = chosen.map(|e| e.1.clone()).unwrap_or_else(|| ends[0].1.clone());
    Ok((x, traces))
}

fn finish(
    method: Method,
    model: &dyn MomentModel,
    x: Vec<f64>,
    traces: Vec<StartTrace>,
    bandwidth: Option<Bandwidth>,
    p: usize,
) -> Result<FitResult> {
    let ev = model.evaluate(&x)?;
    let mv = MomentValue::from_moments(ev.moments())?;
    let names = model.names();
    let lambda = names.iter().position(|n| n == "lambda").map(|k| x[k]);
    let linear_g = (method == Method::Lsaep).then(|| [x[p], x[p + 1]]);
    let converged = traces.iter().any(|t| t.end == x && t.converged);
    Ok(FitResult {
        method,
        parameter_names: names,
        beta: x[..p].to_vec(),
        lambda,
        linear_g,
        q_min: mv.q_value,
        bandwidth,
        g_hat_at_sample: ev.g_hat,
        covariance: None,
        covariance_error: None,
        converged,
        lambda_pinned: lambda.is_some_and(|l| l.abs() >= LAMBDA_PINNED),
        unconverged_profiles: ev.unconverged,
        optimizer_trace: traces,
        estimates: x,
    })
}

/// Starting `beta`: least squares of the adjusted responses on `X`.
fn beta_start(data: &Dataset) -> Result<Vec<f64>> {
    let c: Vec<f64> = data.y().iter().map(|&y| adjusted_response(y)).collect();
    Ok(ols_no_intercept(data.x(), data.p(), &c)?.0)
}

fn resolve_bandwidth(data: &Dataset, options: &FitOptions) -> Result<Bandwidth> {
    match options.bandwidth {
        Some(b) => Ok(b),
        None => select_bandwidth(data),
    }
}

fn clamp_start(mut x: Vec<f64>, bounds: &Bounds) -> Vec<f64> {
    for (k, v) in x.iter_mut().enumerate() {
        *v = v.clamp(bounds.lower[k], bounds.upper[k]);
    }
    x
}

fn attach_covariance(fit: &mut FitResult, data: &Dataset, w: Option<&WeightMatrix>, options: &FitOptions) {
    if !options.covariance {
        return;
    }
    let res = match (fit.method, w) {
        (Method::Plpm, _) => covariance_estimate(fit, data, None, options),
        (_, Some(w)) => covariance_estimate(fit, data, Some(w), options),
        (_, None) => Err(Error::Contract("spatial method without weight matrix".into())),
    };
    match res {
        Ok(c) => fit.covariance = Some(c.row_iter().map(|r| r.iter().copied().collect()).collect()),
        Err(e) => fit.covariance_error = Some(e.to_string()),
    }
}

/// Partially linear probit with SAR errors.
pub fn fit_plspm(data: &Dataset, w: &WeightMatrix, options: &FitOptions) -> Result<FitResult> {
    let b = resolve_bandwidth(data, options)?;
    let model = ProfileModel::new(data, Some(w), b, options)?;
    let beta0 = beta_start(data)?;
    let bounds = model.bounds();
    let starts: Vec<Vec<f64>> = options
        .lambda_starts
        .iter()
        .map(|&l| {
            let mut s = beta0.clone();
            s.push(l);
            clamp_start(s, &bounds)
        })
        .collect();
    let mut steps = vec![0.25; data.p()];
    steps.push(0.2);
    let (x, traces) = minimize_model(&model, &starts, &steps, options)?;
    let mut fit = finish(Method::Plspm, &model, x, traces, Some(b), data.p())?;
    attach_covariance(&mut fit, data, Some(w), options);
    Ok(fit)
}

/// Partially linear probit ignoring spatial dependence (`lambda = 0`).
pub fn fit_plpm(data: &Dataset, options: &FitOptions) -> Result<FitResult> {
    let b = resolve_bandwidth(data, options)?;
    let model = ProfileModel::new(data, None, b, options)?;
    let start = clamp_start(beta_start(data)?, &model.bounds());
    let steps = vec![0.25; data.p()];
    let (x, traces) = minimize_model(&model, &[start], &steps, options)?;
    let mut fit = finish(Method::Plpm, &model, x, traces, Some(b), data.p())?;
    attach_covariance(&mut fit, data, None, options);
    Ok(fit)
}

/// Linear-index SAR probit baseline, `g(z) = gamma0 + gamma1 z`.
pub fn fit_lsaep(data: &Dataset, w: &WeightMatrix, options: &FitOptions) -> Result<FitResult> {
    check_weights(data, w)?;
    let (n, p) = (data.n(), data.p());
    let model = LinearModel {
        data,
        w,
        beta_bound: options.beta_bound,
    };
    let mut design = Vec::with_capacity(n * (p + 2));
    for i in 0..n {
        design.extend_from_slice(data.x_row(i));
        design.push(1.0);
        design.push(data.z()[i]);
    }
    let c: Vec<f64> = data.y().iter().map(|&y| adjusted_response(y)).collect();
    let (coef, _) = ols_no_intercept(&design, p + 2, &c)?;
    let bounds = model.bounds();
    let starts: Vec<Vec<f64>> = options
        .lambda_starts
        .iter()
        .map(|&l| {
            let mut s = coef.clone();
            s.push(l);
            clamp_start(s, &bounds)
        })
        .collect();
    let mut steps = vec![0.25; p + 2];
    steps.push(0.2);
    let (x, traces) = minimize_model(&model, &starts, &steps, options)?;
    let mut fit = finish(Method::Lsaep, &model, x, traces, None, p)?;
    attach_covariance(&mut fit, data, Some(w), options);
    Ok(fit)
}

/// Dispatches on `method`; `w` is ignored by the non-spatial estimator.
pub fn fit(method: Method, data: &Dataset, w: &WeightMatrix, options: &FitOptions) -> Result<FitResult> {
    match method {
        Method::Plspm => fit_plspm(data, w, options),
        Method::Plpm => fit_plpm(data, options),
        Method::Lsaep => fit_lsaep(data, w, options),
    }
}

/// Sandwich covariance `B2^{-1} J' B1 J B2^{-1}` with `B1 = n S S'`,
/// `B2 = J' J` and `J = dS/dtheta`.
///
/// `J` is taken by central differences of the moment vector with the
/// instruments held at their values at the estimate; the profile is
/// re-solved at every perturbed point.
pub fn covariance_estimate(
    fit: &FitResult,
    data: &Dataset,
    w: Option<&WeightMatrix>,
    options: &FitOptions,
) -> Result<DMatrix<f64>> {
    let mut fd_options = options.clone();
    fd_options.scoring.tol = fd_options.scoring.tol.min(1e-12);
    fd_options.scoring.max_iter = fd_options.scoring.max_iter.max(200);
    let spatial_w = || w.ok_or_else(|| Error::Contract(format!("{} covariance needs the weight matrix", fit.method)));
    match fit.method {
        Method::Plspm | Method::Plpm => {
            let b = fit
                .bandwidth
                .ok_or_else(|| Error::Contract("profile fit carries no bandwidth".into()))?;
            let w = if fit.method == Method::Plspm { Some(spatial_w()?) } else { None };
            let model = ProfileModel::new(data, w, b, &fd_options)?;
            sandwich(&model, &fit.estimates)
        }
        Method::Lsaep => {
            let model = LinearModel {
                data,
                w: spatial_w()?,
                beta_bound: options.beta_bound,
            };
            sandwich(&model, &fit.estimates)
        }
    }
}

fn sandwich(model: &dyn MomentModel, params: &[f64]) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if params.len() != d {
        return Err(Error::Contract(format!("{} estimates for a {d}-parameter model", params.len())));
    }
    let at = model.evaluate(params)?;
    let n = at.residuals.len();
    let s = at.moments();
    let q = s.len();
    let xi = &at.instruments;

    let mut jac = DMatrix::<f64>::zeros(q, d);
    for k in 0..d {
        let h = 1e-5 * params[k].abs().max(1.0);
        let mut up = params.to_vec();
        let mut dn = params.to_vec();
        up[k] += h;
        dn[k] -= h;
        let (ru, rd) = (model.evaluate(&up)?.residuals, model.evaluate(&dn)?.residuals);
        for r in 0..q {
            let mut acc = 0.0;
            for i in 0..n {
                acc += xi[(i, r)] * (ru[i] - rd[i]);
            }
            jac[(r, k)] = acc / (2.0 * h * n as f64);
        }
    }

    let b2 = jac.transpose() * &jac;
    let eig = SymmetricEigen::new(b2.clone());
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let condition = if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY };
    if !(condition <= MAX_B2_CONDITION) {
        return Err(Error::NearSingular { condition });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let b2_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();

    let s_vec = nalgebra::DVector::from_vec(s);
    let b1 = (&s_vec * s_vec.transpose()) * n as f64;
    let middle = jac.transpose() * b1 * &jac;
    let omega = &b2_inv * middle * &b2_inv;
    Ok((&omega + omega.transpose()) * 0.5)
}

/// `g_theta_hat` on arbitrary points. Points outside the sample range of `z`,
/// or where the profile cannot be solved, yield `None`.
pub fn g_curve(
    fit: &FitResult,
    data: &Dataset,
    w: Option<&WeightMatrix>,
    grid: &[f64],
    scoring: &ScoringConfig,
) -> Result<Vec<Option<f64>>> {
    let (lo, hi) = data.z_hull();
    let inside = |z: f64| z >= lo && z <= hi;
    if let Some([g0, g1]) = fit.linear_g {
        return Ok(grid.iter().map(|&z| inside(z).then_some(g0 + g1 * z)).collect());
    }
    let b = fit
        .bandwidth
        .ok_or_else(|| Error::Contract("profile fit carries no bandwidth".into()))?;
    let theta = fit.theta_hat();
    let sv = match (fit.method, w) {
        (Method::Plpm, _) => SarVariance::independent(data.n()),
        (_, Some(w)) => {
            check_weights(data, w)?;
            sar_variance(w, theta.lambda)?
        }
        (_, None) => return Err(Error::Contract("spatial fit needs the weight matrix".into())),
    };
    let ctx = ProfileContext::new(&theta, data, &sv)?;
    Ok(par::map_indexed(grid.len(), |k| {
        let z = grid[k];
        if !inside(z) {
            return None;
        }
        let kw = crate::kernel::KernelWeights::new(z, data.z(), b);
        ctx.solve(z, &kw.weights, scoring).ok().map(|f| f.eta)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{build_knn_weights, Coordinates};
    use approx::assert_relative_eq;

    fn small_data(n: usize, seed: u64) -> (Dataset, WeightMatrix) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut z = Vec::new();
        let mut y = Vec::new();
        let mut pts = Vec::new();
        for i in 0..n {
            let (x1, x2): (f64, f64) = (rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0);
            let zi: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            x.extend([x1, x2]);
            z.push(zi);
            y.push(-x1 + x2 + 0.5 * zi + e > 0.0);
            pts.push([(i % 7) as f64, (i / 7) as f64]);
        }
        let coords = Coordinates::new(pts).unwrap();
        let w = build_knn_weights(&coords, 3, true).unwrap();
        (Dataset::new(y, x, 2, z).unwrap().with_coordinates(coords).unwrap(), w)
    }

    #[test]
    fn theta_bounds() {
        assert!(Theta::new(vec![1.0], 0.96).is_err());
        assert!(Theta::new(vec![f64::NAN], 0.0).is_err());
        assert!(Theta::new(vec![1.0], -0.95).is_ok());
    }

    #[test]
    fn method_parsing_and_display() {
        assert_eq!("PLSPM".parse::<Method>().unwrap(), Method::Plspm);
        assert_eq!("lsaep".parse::<Method>().unwrap(), Method::Lsaep);
        assert!("probit".parse::<Method>().is_err());
        assert_eq!(Method::Plpm.to_string(), "PLPM");
    }

    #[test]
    fn zero_lambda_zeroes_lambda_instrument() {
        let (d, _) = small_data(30, 2);
        let sv = SarVariance::independent(30);
        let theta = Theta::new(vec![-0.5, 0.8], 0.0).unwrap();
        let ctx = ProfileContext::new(&theta, &d, &sv).unwrap();
        let b = Bandwidth::new(0.4).unwrap();
        let profiles: Vec<ProfileFit> = d
            .z()
            .iter()
            .map(|&z| ctx.solve(z, &crate::kernel::KernelWeights::new(z, d.z(), b).weights, &ScoringConfig::default()).unwrap())
            .collect();
        let xi = instruments(&theta, &profiles, &d, &sv).unwrap();
        assert_eq!(xi.ncols(), 3);
        assert!(xi.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intercept_confounding_cancels_first_column() {
        let d = Dataset::new(vec![true, false], vec![0.0, 0.0], 1, vec![0.0, 1.0]).unwrap();
        let sv = SarVariance::independent(2);
        let theta = Theta::new(vec![0.3], 0.0).unwrap();
        let pf = |z| ProfileFit {
            z,
            eta: 0.1,
            grad_beta: vec![-0.0],
            grad_lambda: 0.0,
            iterations: 1,
            converged: true,
            effective_weight_mass: 1.0,
        };
        let xi = instruments(&theta, &[pf(0.0), pf(1.0)], &d, &sv).unwrap();
        assert!(xi.column(0).iter().all(|&v| v == 0.0));

        let d1 = Dataset::new(vec![true, false], vec![1.0, 1.0], 1, vec![0.0, 1.0]).unwrap();
        let mut a = pf(0.0);
        a.grad_beta = vec![-1.0];
        let xi1 = instruments(&theta, &[a.clone(), a], &d1, &sv).unwrap();
        assert!(xi1.column(0).iter().all(|&v| v == 0.0));
        assert!(instruments(&theta, &[pf(0.0)], &d1, &sv).is_err());
    }

    #[test]
    fn single_observation_moment() {
        // n = 1, xi = 1, Y = 1, G = 0.
        let ev = Evaluation {
            residuals: vec![residual_at(0.0, true)],
            instruments: DMatrix::from_element(1, 1, 1.0),
            g_hat: vec![0.0],
            unconverged: 0,
        };
        let mv = MomentValue::from_moments(ev.moments()).unwrap();
        assert_relative_eq!(mv.s[0], 0.797885, epsilon = 1e-6);
        let zero = MomentValue::from_moments(vec![0.0, 0.0]).unwrap();
        assert_eq!(zero.q_value, 0.0);
    }

    #[test]
    fn moment_vector_matches_term_by_term_sum() {
        let (d, w) = small_data(10, 4);
        let b = Bandwidth::new(0.6).unwrap();
        let cfg = ScoringConfig::default();
        let theta = Theta::new(vec![-0.7, 0.9], 0.35).unwrap();
        let mv = moment_vector(&theta, &d, &w, b, &cfg).unwrap();

        let sv = sar_variance(&w, 0.35).unwrap();
        let mut s = [0.0; 3];
        for i in 0..10 {
            let f = crate::profile::solve_g_hat(&theta, d.z()[i], &d, &sv, b, &cfg).unwrap();
            let x = d.x_row(i);
            let index = x[0] * theta.beta[0] + x[1] * theta.beta[1] + f.eta;
            let v = sv.v[i];
            let u = crate::probit::generalized_residual(d.y()[i], crate::probit::LatentIndex::new(index / v).unwrap());
            s[0] += (x[0] + f.grad_beta[0]) / v * u / 10.0;
            s[1] += (x[1] + f.grad_beta[1]) / v * u / 10.0;
            s[2] += (-sv.v_prime[i] / (v * v) * index + f.grad_lambda / v) * u / 10.0;
        }
        for (a, b) in mv.s.iter().zip(&s) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-15);
        }
        assert_relative_eq!(mv.q_value, s.iter().map(|v| v * v).sum::<f64>(), max_relative = 1e-12);
    }

    #[test]
    fn spatial_at_zero_matches_nonspatial() {
        let (d, w) = small_data(25, 9);
        let b = Bandwidth::new(0.5).unwrap();
        let cfg = ScoringConfig::default();
        let full = moment_vector(&Theta::new(vec![-0.4, 1.1], 0.0).unwrap(), &d, &w, b, &cfg).unwrap();
        let plain = moment_vector_nonspatial(&[-0.4, 1.1], &d, b, &cfg).unwrap();
        assert_eq!(&full.s[..2], &plain.s[..]);
        assert_eq!(full.s[2], 0.0);
    }

    #[test]
    fn moment_vector_permutation_invariant() {
        let (d, w) = small_data(20, 12);
        let b = Bandwidth::new(0.5).unwrap();
        let cfg = ScoringConfig::default();
        let theta = Theta::new(vec![-0.6, 0.7], 0.3).unwrap();
        let perm: Vec<usize> = (0..20).map(|k| (k * 7 + 3) % 20).collect();
        let a = moment_vector(&theta, &d, &w, b, &cfg).unwrap();
        let bm = moment_vector(&theta, &d.permuted(&perm).unwrap(), &w.permuted(&perm).unwrap(), b, &cfg).unwrap();
        for k in 0..3 {
            assert!((a.s[k] - bm.s[k]).abs() <= 1e-12, "{k}: {} vs {}", a.s[k], bm.s[k]);
        }
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let (d, w) = small_data(30, 5);
        let b = Bandwidth::new(0.5).unwrap();
        let opts = |execution| FitOptions {
            execution,
            ..Default::default()
        };
        let par_model = ProfileModel::new(&d, Some(&w), b, &opts(Execution::Parallel)).unwrap();
        let seq_model = ProfileModel::new(&d, Some(&w), b, &opts(Execution::Sequential)).unwrap();
        let x = [-0.8, 0.9, 0.25];
        assert_eq!(par_model.evaluate(&x).unwrap().moments(), seq_model.evaluate(&x).unwrap().moments());
    }

    #[test]
    fn weight_size_mismatch_is_contract_error() {
        let (d, _) = small_data(20, 1);
        let (_, w) = small_data(21, 1);
        let r = moment_vector(&Theta::new(vec![0.0, 0.0], 0.1).unwrap(), &d, &w, Bandwidth::new(0.5).unwrap(), &ScoringConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
