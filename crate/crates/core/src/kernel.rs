//! Gaussian kernel, Nadaraya-Watson regression and the bandwidth selector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{dot, Dataset, MIN_ROWS};
use crate::error::{Error, Result};
use crate::par;
use crate::probit::adjusted_response;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Kernel mass below which a point is considered outside the data support.
pub const MIN_KERNEL_MASS: f64 = 1e-300;

/// Number of candidates in the cross-validation grid.
pub const GRID_SIZE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Bandwidth(value))
        } else {
            Err(Error::Config(format!("bandwidth must be positive and finite, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Bandwidth {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Bandwidth::new(v)
    }
}

impl From<Bandwidth> for f64 {
    fn from(b: Bandwidth) -> f64 {
        b.0
    }
}

/// Standard normal density as a smoothing kernel.
#[inline]
pub fn gaussian_kernel(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Kernel weights `K((center - z_i) / b)` around one center.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub center: f64,
    pub weights: Vec<f64>,
}

impl KernelWeights {
    pub fn new(center: f64, zs: &[f64], b: Bandwidth) -> Self {
        let inv_b = 1.0 / b.value();
        let weights = zs.iter().map(|&z| gaussian_kernel((center - z) * inv_b)).collect();
        KernelWeights { center, weights }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Local-constant kernel regression of `rs` on `zs` at `query`.
pub fn nadaraya_watson(query: f64, zs: &[f64], rs: &[f64], b: Bandwidth) -> Result<f64> {
    if zs.is_empty() || zs.len() != rs.len() {
        return Err(Error::Contract(format!("nadaraya_watson needs equal nonempty inputs ({} vs {})", zs.len(), rs.len())));
    }
    let kw = KernelWeights::new(query, zs, b);
    let mass = kw.mass();
    if !(mass > MIN_KERNEL_MASS) {
        return Err(Error::OutOfSupport { z: query });
    }
    Ok(dot(&kw.weights, rs) / mass)
}

/// Leave-one-out cross-validation score `sum_i (r_i - m_{-i}(z_i))^2`.
/// Infinite when some left-out point has no kernel mass.
pub fn loo_cv_score(zs: &[f64], rs: &[f64], b: Bandwidth) -> f64 {
    let inv_b = 1.0 / b.value();
    let mut score = 0.0;
    for (i, (&zi, &ri)) in zs.iter().zip(rs).enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for (j, (&zj, &rj)) in zs.iter().zip(rs).enumerate() {
            if i != j {
                let k = gaussian_kernel((zi - zj) * inv_b);
                num += k * rj;
                den += k;
            }
        }
        if !(den > MIN_KERNEL_MASS) {
            return f64::INFINITY;
        }
        let e = ri - num / den;
        score += e * e;
    }
    score
}

/// Log-spaced candidates spanning `[0.05, 3] * sd(z)`.
pub fn bandwidth_grid(zs: &[f64]) -> Result<Vec<f64>> {
    let sd = sample_sd(zs);
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::data("smoothing covariate z has zero variance"));
    }
    // The n^{-1/5} rate factors of the usual rule-of-thumb bounds cancel here.
    let (lo, hi) = (0.05 * sd, 3.0 * sd);
    let step = (hi / lo).ln() / (GRID_SIZE - 1) as f64;
    Ok((0..GRID_SIZE).map(|k| lo * (step * k as f64).exp()).collect())
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Least squares without intercept. Returns `(coefficients, residuals)`.
pub fn ols_no_intercept(x: &[f64], p: usize, c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = c.len();
    if x.len() != n * p || n < p {
        return Err(Error::data(format!("least squares needs n >= p rows ({n} rows, p = {p})")));
    }
    let xm = DMatrix::from_row_slice(n, p, x);
    let qr = xm.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    if (0..p).any(|k| r[(k, k)].abs() <= 1e-10 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::data("covariate matrix X is rank deficient"));
    }
    let rhs = qr.q().transpose() * DVector::from_column_slice(c);
    let coef = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::data("covariate matrix X is rank deficient"))?;
    let fitted = &xm * &coef;
    let resid = c.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    Ok((coef.iter().copied().collect(), resid))
}

/// Picks the grid candidate minimizing the leave-one-out score; among
/// (numerically) tied minimizers the largest bandwidth wins.
pub fn cv_select(zs: &[f64], rs: &[f64]) -> Result<Bandwidth> {
    let grid = bandwidth_grid(zs)?;
    let scores = par::map_indexed(grid.len(), |k| loo_cv_score(zs, rs, Bandwidth(grid[k])));
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Numerical("cross-validation score is not finite for any bandwidth".into()));
    }
    let tol = 1e-12 * best.abs();
    let k = (0..grid.len()).rev().find(|&k| scores[k] <= best + tol).expect("minimum exists");
    Bandwidth::new(grid[k])
}

/// Two-step bandwidth: regress the adjusted probit transform of `y` on `X`
/// (no intercept), then cross-validate a kernel regression of the residuals on `z`.
pub fn select_bandwidth(data: &Dataset) -> Result<Bandwidth> {
    if data.n() < MIN_ROWS {
        return Err(Error::data(format!("bandwidth selection needs at least {MIN_ROWS} observations")));
    }
    let c: Vec<f64> = data.y().iter().map(|&y| adjusted_response(y)).collect();
    let (_, resid) = ols_no_intercept(data.x(), data.p(), &c)?;
    cv_select(data.z(), &resid)
}
