//! Kernel-weighted profile likelihood for the nonparametric component.
//!
//! For fixed `theta = (beta, lambda)` and a query point `z`, `g_theta(z)` is
//! the root in `eta` of the localized score
//!
//! ```text
//! psi(eta) = sum_i v_i^{-1} Lambda(G_i) (Y_i - Phi(G_i)) K((z - Z_i) / b),
//! G_i      = (X_i' beta + eta) / v_i,
//! ```
//!
//! found by Fisher scoring. Implicit differentiation of `psi(g_theta(z)) = 0`
//! gives the analytic gradient of `g_theta(z)` in `theta`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::Theta;
use crate::kernel::{Bandwidth, KernelWeights, MIN_KERNEL_MASS};
use crate::probit::{adjusted_response, delta_at, information_weight, residual_at};
use crate::spatial::SarVariance;

/// Magnitude of `eta` treated as divergence (e.g. perfect separation).
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Smallest Fisher information accepted as a scoring denominator.
pub const MIN_INFORMATION: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub max_iter: usize,
    /// Convergence threshold on `|psi / Psi|`.
    pub tol: f64,
    /// Initial step fraction, halved while the score magnitude grows.
    pub damping: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            max_iter: 50,
            tol: 1e-9,
            damping: 1.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.tol > 0.0) || !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("invalid scoring configuration {self:?}")));
        }
        Ok(())
    }
}

/// Solution of the profile equation at one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFit {
    pub z: f64,
    /// `g_theta(z)`.
    pub eta: f64,
    /// `d g_theta(z) / d beta`.
    pub grad_beta: Vec<f64>,
    /// `d g_theta(z) / d lambda`.
    pub grad_lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub effective_weight_mass: f64,
}

/// The `theta`-dependent per-observation quantities every query point shares.
#[derive(Debug, Clone)]
pub struct ProfileContext<'a> {
    data: &'a Dataset,
    xb: Vec<f64>,
    inv_v: Vec<f64>,
    v_prime: &'a [f64],
}

impl<'a> ProfileContext<'a> {
    pub fn new(theta: &Theta, data: &'a Dataset, sv: &'a SarVariance) -> Result<Self> {
        if theta.beta.len() != data.p() {
            return Err(Error::Contract(format!("beta has {} entries for p = {}", theta.beta.len(), data.p())));
        }
        if sv.len() != data.n() {
            return Err(Error::Contract(format!("{} SAR scales for {} observations", sv.len(), data.n())));
        }
        if sv.lambda != theta.lambda {
            return Err(Error::Contract(format!(
                "SAR scales computed at lambda = {} but theta has lambda = {}",
                sv.lambda, theta.lambda
            )));
        }
        Ok(ProfileContext {
            data,
            xb: data.linear_index(&theta.beta),
            inv_v: sv.v.iter().map(|v| 1.0 / v).collect(),
            v_prime: &sv.v_prime,
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    /// `X_i' beta`.
    pub fn linear_index(&self) -> &[f64] {
        &self.xb
    }

    /// `(psi(eta), Psi(eta))` in one pass over the observations.
    fn score_and_information(&self, eta: f64, weights: &[f64]) -> (f64, f64) {
        let y = self.data.y();
        let (mut psi, mut info) = (0.0, 0.0);
        for i in 0..weights.len() {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let iv = self.inv_v[i];
            let g = (self.xb[i] + eta) * iv;
            psi += w * iv * residual_at(g, y[i]);
            info += w * iv * iv * information_weight(g);
        }
        (psi, info)
    }

    pub fn score(&self, eta: f64, weights: &[f64]) -> f64 {
        self.score_and_information(eta, weights).0
    }

    pub fn information(&self, eta: f64, weights: &[f64]) -> f64 {
        self.score_and_information(eta, weights).1
    }

    /// Closed-form starting value built from the adjusted responses.
    pub fn initial_eta(&self, z: f64, weights: &[f64]) -> Result<f64> {
        let y = self.data.y();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..weights.len() {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let c = adjusted_response(y[i]);
            let iv = self.inv_v[i];
            let lp = w * information_weight(c);
            num += lp * iv * (c - iv * self.xb[i]);
            den += lp * iv * iv;
        }
        if !(den > MIN_KERNEL_MASS) {
            return Err(Error::OutOfSupport { z });
        }
        Ok(num / den)
    }

    /// Fisher scoring for the root of `psi`, then the analytic gradient.
    pub fn solve(&self, z: f64, weights: &[f64], cfg: &ScoringConfig) -> Result<ProfileFit> {
        let y = self.data.y();
        let mass: f64 = weights.iter().sum();
        if !(mass > MIN_KERNEL_MASS) {
            return Err(Error::OutOfSupport { z });
        }
        // Complete separation: psi keeps one sign, so no root exists.
        let ones: f64 = weights.iter().zip(y).filter(|(_, &yi)| yi).map(|(w, _)| w).sum();
        let zeros: f64 = weights.iter().zip(y).filter(|(_, &yi)| !yi).map(|(w, _)| w).sum();
        if ones <= 0.0 {
            return Err(Error::Divergence { z, eta: f64::NEG_INFINITY });
        }
        if zeros <= 0.0 {
            return Err(Error::Divergence { z, eta: f64::INFINITY });
        }

        let mut eta = self.initial_eta(z, weights)?;
        let (mut psi, mut info) = self.score_and_information(eta, weights);
        // psi is decreasing in eta; once it has changed sign the root is
        // bracketed and steps leaving the bracket fall back to bisection.
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iter {
            if psi > 0.0 {
                lo = lo.max(eta);
            } else if psi < 0.0 {
                hi = hi.min(eta);
            } else {
                converged = true;
                break;
            }
            if !(info > MIN_INFORMATION) {
                return Err(Error::DegenerateInformation { z });
            }
            let full = psi / info;
            if full.abs() <= cfg.tol || hi - lo <= cfg.tol {
                converged = true;
                break;
            }
            let mut damping = cfg.damping;
            loop {
                let mut cand = eta + damping * full;
                let bracketed = lo.is_finite() && hi.is_finite();
                if bracketed && !(cand > lo && cand < hi) {
                    cand = 0.5 * (lo + hi);
                } else if !(cand.abs() <= DIVERGENCE_LIMIT) {
                    return Err(Error::Divergence { z, eta: cand });
                }
                let (mut p2, mut i2) = self.score_and_information(cand, weights);
                if bracketed && p2.abs() > psi.abs() && cand != 0.5 * (lo + hi) {
                    cand = 0.5 * (lo + hi);
                    (p2, i2) = self.score_and_information(cand, weights);
                }
                if bracketed || p2.abs() <= psi.abs() || damping < 1e-12 {
                    eta = cand;
                    psi = p2;
                    info = i2;
                    break;
                }
                damping *= 0.5;
            }
            iterations += 1;
        }
        if !converged && info > MIN_INFORMATION && (psi / info).abs() <= cfg.tol {
            converged = true;
        }

        let (grad_beta, grad_lambda) = self.gradient(z, eta, weights)?;
        Ok(ProfileFit {
            z,
            eta,
            grad_beta,
            grad_lambda,
            iterations,
            converged,
            effective_weight_mass: mass,
        })
    }

    /// Implicit-function gradient of `g_theta(z)` at the root `eta`.
    fn gradient(&self, z: f64, eta: f64, weights: &[f64]) -> Result<(Vec<f64>, f64)> {
        let data = self.data;
        let y = data.y();
        let p = data.p();
        let mut den = 0.0;
        let mut num_beta = vec![0.0; p];
        let mut num_lambda = 0.0;
        for i in 0..weights.len() {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let iv = self.inv_v[i];
            let index = self.xb[i] + eta;
            let g = index * iv;
            let delta = delta_at(g, y[i]);
            let wd = w * iv * iv * delta;
            den += wd;
            for (acc, x) in num_beta.iter_mut().zip(data.x_row(i)) {
                *acc += wd * x;
            }
            let vp = self.v_prime[i];
            if vp != 0.0 {
                num_lambda += w * vp * iv * iv * (iv * delta * index + residual_at(g, y[i]));
            }
        }
        if !(den.abs() > MIN_INFORMATION) {
            return Err(Error::DegenerateInformation { z });
        }
        let grad_beta = num_beta.iter().map(|nb| -nb / den).collect();
        Ok((grad_beta, num_lambda / den))
    }
}

fn checked_weights(z: f64, data: &Dataset, b: Bandwidth) -> Result<KernelWeights> {
    if !z.is_finite() {
        return Err(Error::Domain(format!("query point must be finite, got {z}")));
    }
    let kw = KernelWeights::new(z, data.z(), b);
    if !(kw.mass() > MIN_KERNEL_MASS) {
        return Err(Error::OutOfSupport { z });
    }
    Ok(kw)
}

/// Localized score `psi(eta; theta, z)`.
pub fn score_psi(eta: f64, theta: &Theta, z: f64, data: &Dataset, sv: &SarVariance, b: Bandwidth) -> Result<f64> {
    let ctx = ProfileContext::new(theta, data, sv)?;
    let kw = checked_weights(z, data, b)?;
    Ok(ctx.score(eta, &kw.weights))
}

/// Leading term of the Fisher information, `sum_i v_i^{-2} Lambda(G_i) phi(G_i) K_i`.
pub fn fisher_info(eta: f64, theta: &Theta, z: f64, data: &Dataset, sv: &SarVariance, b: Bandwidth) -> Result<f64> {
    let ctx = ProfileContext::new(theta, data, sv)?;
    let kw = checked_weights(z, data, b)?;
    let info = ctx.information(eta, &kw.weights);
    if !(info > MIN_INFORMATION) {
        return Err(Error::DegenerateInformation { z });
    }
    Ok(info)
}

pub fn initial_eta(theta: &Theta, z: f64, data: &Dataset, sv: &SarVariance, b: Bandwidth) -> Result<f64> {
    let ctx = ProfileContext::new(theta, data, sv)?;
    let kw = checked_weights(z, data, b)?;
    ctx.initial_eta(z, &kw.weights)
}

/// Solves for `g_theta(z)` and its gradient in `theta`.
pub fn solve_g_hat(
    theta: &Theta,
    z: f64,
    data: &Dataset,
    sv: &SarVariance,
    b: Bandwidth,
    cfg: &ScoringConfig,
) -> Result<ProfileFit> {
    cfg.validate()?;
    let ctx = ProfileContext::new(theta, data, sv)?;
    let kw = checked_weights(z, data, b)?;
    ctx.solve(z, &kw.weights, cfg)
}
