//! Standard-normal link functions and the per-observation probit quantities
//! (generalized residual, score weight and its derivative).
//!
//! The lower and upper tail probabilities are each taken from the
//! complementary error function on the side where they are small, so the
//! ratio `phi / (Phi (1 - Phi))` keeps full precision far into the tails.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Probability clamp applied to `Phi` and `1 - Phi` before forming ratios.
pub const PROB_CLAMP: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Latent probit index `G = (x'beta + eta) / v`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LatentIndex(f64);

impl LatentIndex {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(LatentIndex(value))
        } else {
            Err(Error::Domain(format!("latent index must be finite, got {value}")))
        }
    }

    /// Builds `(xb + eta) / v`.
    pub fn from_parts(xb: f64, eta: f64, v: f64) -> Result<Self> {
        if !(v > 0.0) {
            return Err(Error::Domain(format!("scale v must be positive, got {v}")));
        }
        Self::new((xb + eta) / v)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `Phi`, `phi`, `Lambda` and `Lambda'` evaluated at one index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBundle {
    /// Density `phi(g)`.
    pub phi: f64,
    /// Clamped `Phi(g)`.
    pub cdf: f64,
    /// Clamped `1 - Phi(g)`, computed directly in the upper tail.
    pub upper: f64,
    /// `Lambda(g) = phi / (Phi (1 - Phi))`.
    pub lambda: f64,
    /// Derivative of `Lambda` at `g`.
    pub lambda_prime: f64,
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(g: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * g * g).exp()
}

/// Standard normal CDF through `erfc`.
#[inline]
pub fn normal_cdf(g: f64) -> f64 {
    0.5 * libm::erfc(-g * FRAC_1_SQRT_2)
}

/// `(Phi(g), 1 - Phi(g))`, each accurate in its own small tail.
#[inline]
fn tails(g: f64) -> (f64, f64) {
    if g >= 0.0 {
        let upper = 0.5 * libm::erfc(g * FRAC_1_SQRT_2);
        (1.0 - upper, upper)
    } else {
        let cdf = 0.5 * libm::erfc(-g * FRAC_1_SQRT_2);
        (cdf, 1.0 - cdf)
    }
}

/// Unchecked bundle used on hot paths where the index is known finite.
#[inline]
fn bundle_at(g: f64) -> LinkBundle {
    let phi = normal_pdf(g);
    let (cdf, upper) = tails(g);
    let cdf = cdf.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let upper = upper.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lambda = phi / (cdf * upper);
    let mills_upper = phi / upper;
    let lambda_prime = mills_upper * (mills_upper - g) / cdf - phi * phi / (cdf * cdf * upper);
    LinkBundle {
        phi,
        cdf,
        upper,
        lambda,
        lambda_prime,
    }
}

pub fn link_bundle(g: LatentIndex) -> LinkBundle {
    bundle_at(g.value())
}

impl LinkBundle {
    /// `y - Phi(g)`, using the upper tail directly when `y = 1`.
    #[inline]
    pub fn response_gap(&self, y: bool) -> f64 {
        if y {
            self.upper
        } else {
            -self.cdf
        }
    }
}

/// Inverse Mills ratio `phi(g) / (1 - Phi(g))`, finite for every finite `g`.
#[inline]
pub fn inverse_mills(g: f64) -> f64 {
    if g < 30.0 {
        normal_pdf(g) / tails(g).1
    } else {
        // Laplace continued fraction g + 1/(g + 2/(g + 3/(g + ...))).
        let mut t = g;
        for k in (1..=24).rev() {
            t = g + k as f64 / t;
        }
        t
    }
}

/// Generalized residual at a raw index. Algebraically `Lambda(g) (y - Phi(g))`,
/// evaluated as `phi/Phi` or `-phi/(1 - Phi)` so no clamping is needed.
#[inline]
pub(crate) fn residual_at(g: f64, y: bool) -> f64 {
    if y {
        inverse_mills(-g)
    } else {
        -inverse_mills(g)
    }
}

/// `Lambda'(g) (y - Phi(g)) - Lambda(g) phi(g)`: the derivative of `residual_at` in `g`.
#[inline]
pub(crate) fn delta_at(g: f64, y: bool) -> f64 {
    if y {
        let r = inverse_mills(-g);
        -r * (g + r)
    } else {
        let m = inverse_mills(g);
        -m * (m - g)
    }
}

/// `Lambda(g) phi(g) = phi^2 / (Phi (1 - Phi))`.
#[inline]
pub(crate) fn information_weight(g: f64) -> f64 {
    inverse_mills(g) * inverse_mills(-g)
}

/// Generalized residual `E[U | Y]` of a probit observation.
pub fn generalized_residual(y: bool, g: LatentIndex) -> f64 {
    residual_at(g.value(), y)
}

/// Derivative of the generalized residual with respect to the index.
pub fn delta_weight(y: bool, g: LatentIndex) -> f64 {
    delta_at(g.value(), y)
}

/// Inverse standard normal CDF.
///
/// Rational approximation (Acklam) followed by one Halley refinement
/// against the `erfc`-based CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let e = normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// The adjusted probit transform `Phi^{-1}(0.9 y + 0.1 (1 - y))` of a binary response.
pub fn adjusted_response(y: bool) -> f64 {
    // Phi^{-1}(0.9); the y = 0 case is its mirror image.
    const Q90: f64 = 1.281_551_565_544_600_5;
    if y {
        Q90
    } else {
        -Q90
    }
}
