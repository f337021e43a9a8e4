//! Box-constrained Nelder-Mead. Trial points leaving the box are reflected
//! back across the violated face (and clamped if still outside).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadConfig {
    /// Evaluation budget per parameter.
    pub max_evals_per_dim: usize,
    /// Simplex size tolerance (max-norm distance to the best vertex).
    pub x_tol: f64,
    /// Spread tolerance on criterion values across the simplex.
    pub f_tol: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        NelderMeadConfig {
            max_evals_per_dim: 150,
            x_tol: 1e-4,
            f_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Config("bounds need lower < upper in every coordinate".into()));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn reflect(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            if *v < lo {
                *v = lo + (lo - *v);
            } else if *v > hi {
                *v = hi - (*v - hi);
            }
            *v = v.clamp(lo, hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(k, v)| *v >= self.lower[k] && *v <= self.upper[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with initial simplex edges `steps`.
/// Non-finite criterion values are treated as `+inf`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], bounds: &Bounds, cfg: &NelderMeadConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    if dim == 0 || steps.len() != dim || bounds.dim() != dim {
        return Err(Error::Contract("Nelder-Mead dimensions disagree".into()));
    }
    let max_evals = cfg.max_evals_per_dim * dim;
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    bounds.reflect(&mut start);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(&start, &mut evals);
    simplex.push((start.clone(), f0));
    for k in 0..dim {
        let mut v = start.clone();
        v[k] += steps[k];
        if v[k] > bounds.upper[k] {
            v[k] = start[k] - steps[k];
        }
        bounds.reflect(&mut v);
        let fv = eval(&v, &mut evals);
        simplex.push((v, fv));
    }

    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let size = simplex[1..]
            .iter()
            .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if best.is_finite() && worst - best <= cfg.f_tol && size <= cfg.x_tol {
            converged = true;
            break;
        }
        if evals >= max_evals {
            break;
        }

        let mut centroid = vec![0.0; dim];
        for (v, _) in &simplex[..dim] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&simplex[dim].0).map(|(c, w)| c + t * (c - w)).collect();
            bounds.reflect(&mut p);
            p
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < best {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < worst.min(fr) {
            simplex[dim] = (xc, fc);
            continue;
        }
        // Shrink towards the best vertex.
        let anchor = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let mut v: Vec<f64> = anchor.iter().zip(&entry.0).map(|(a, x)| a + 0.5 * (x - a)).collect();
            bounds.reflect(&mut v);
            let fv = eval(&v, &mut evals);
            *entry = (v, fv);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    Ok(Minimum {
        x,
        f,
        evaluations: evals,
        converged,
    })
}
