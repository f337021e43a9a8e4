//! k-nearest-neighbour spatial weights and the SAR error process
//! `U = (I - lambda W)^{-1} eps`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest tolerated 1-norm condition estimate of `I - lambda W`.
pub const MAX_SAR_CONDITION: f64 = 1e12;

/// Planar site locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    points: Vec<[f64; 2]>,
}

impl Coordinates {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::data_row(i + 1, "non-finite coordinate"));
        }
        Ok(Coordinates { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }
}

/// Sparse row-major spatial weight matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl WeightMatrix {
    /// Builds from `(i, j, w)` triplets. Duplicate entries are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in triplets {
            if i >= n || j >= n {
                return Err(Error::data(format!("weight entry ({i}, {j}) outside a {n}x{n} matrix")));
            }
            if i == j {
                return Err(Error::data(format!("weight matrix diagonal entry at {i} must be zero")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::data(format!("weight ({i}, {j}) = {w} must be finite and nonnegative")));
            }
            rows[i].push((j, w));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (j, w) in row {
                match cols.last() {
                    Some(&last) if last == j && cols.len() > *row_ptr.last().unwrap() => {
                        *vals.last_mut().unwrap() += w;
                    }
                    _ => {
                        cols.push(j);
                        vals.push(w);
                    }
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(WeightMatrix { n, row_ptr, cols, vals })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Nonzeros of row `i` as `(column, weight)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                m[(i, j)] = w;
            }
        }
        m
    }

    /// Applies a permutation: new index `k` holds old observation `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::Contract("permutation length differs from matrix size".into()));
        }
        let mut inverse = vec![usize::MAX; self.n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut trip = Vec::with_capacity(self.nnz());
        for (new_i, &old_i) in perm.iter().enumerate() {
            for (old_j, w) in self.row(old_i) {
                trip.push((new_i, inverse[old_j], w));
            }
        }
        Self::from_triplets(self.n, &trip)
    }

    /// Coordinate-list text, one `i j w` line per nonzero, 0-based.
    pub fn to_triplet_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                let _ = writeln!(out, "{i} {j} {w:e}");
            }
        }
        out
    }

    /// Parses coordinate-list text. Blank lines and `#` comments are skipped.
    pub fn from_triplet_text<R: Read>(n: usize, reader: R) -> Result<Self> {
        let mut trip = Vec::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [i, j, w] => i
                    .parse::<usize>()
                    .ok()
                    .zip(j.parse::<usize>().ok())
                    .zip(w.parse::<f64>().ok()),
                _ => None,
            };
            let ((i, j), w) =
                parsed.ok_or_else(|| Error::data_row(lineno + 1, format!("expected `i j w`, got `{line}`")))?;
            trip.push((i, j, w));
        }
        Self::from_triplets(n, &trip)
    }
}

/// k-nearest-neighbour weights by Euclidean distance, ties broken by the
/// smaller index. Row-normalized weights are `1/k`, raw weights are 1.
pub fn build_knn_weights(coords: &Coordinates, k: usize, row_normalize: bool) -> Result<WeightMatrix> {
    let pts = coords.points();
    let n = pts.len();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k = {k} neighbours requires 0 < k < n = {n}")));
    }
    let w = if row_normalize { 1.0 / k as f64 } else { 1.0 };
    let mut trip = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, a) in pts.iter().enumerate() {
        cand.clear();
        for (j, b) in pts.iter().enumerate() {
            if i == j {
                continue;
            }
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            if d2 == 0.0 {
                return Err(Error::data(format!("duplicate location at observations {} and {}", i.min(j) + 1, i.max(j) + 1)));
            }
            cand.push((d2, j));
        }
        cand.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, j) in &cand[..k] {
            trip.push((i, j, w));
        }
    }
    WeightMatrix::from_triplets(n, &trip)
}

/// Per-observation SAR error scales at one `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct SarVariance {
    pub lambda: f64,
    /// `v_i = sqrt(V_ii)`, `V = (I - lambda W)^{-1} (I - lambda W)^{-T}`.
    pub v: Vec<f64>,
    /// `dv_i / dlambda`.
    pub v_prime: Vec<f64>,
}

impl SarVariance {
    /// Unit scales, as for independent errors.
    pub fn independent(n: usize) -> Self {
        SarVariance {
            lambda: 0.0,
            v: vec![1.0; n],
            v_prime: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Dense `(I - lambda W)^{-1}` with a 1-norm condition check.
fn sar_inverse(w: &WeightMatrix, lambda: f64) -> Result<DMatrix<f64>> {
    if !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be finite, got {lambda}")));
    }
    let n = w.n();
    let mut s = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (j, wij) in w.row(i) {
            s[(i, j)] -= lambda * wij;
        }
    }
    let norm_s = one_norm(&s);
    let inv = s
        .lu()
        .try_inverse()
        .ok_or(Error::SingularSar { lambda, condition: f64::INFINITY })?;
    let condition = norm_s * one_norm(&inv);
    if !(condition.is_finite() && condition <= MAX_SAR_CONDITION) {
        return Err(Error::SingularSar { lambda, condition });
    }
    Ok(inv)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Computes `v(lambda)` and `v'(lambda)`.
///
/// With `A = (I - lambda W)^{-1}`, `dV/dlambda = A W V + (A W V)^T`, so
/// `v'_i = [A W V]_ii / v_i = row_i(A W A) . row_i(A) / v_i`.
pub fn sar_variance(w: &WeightMatrix, lambda: f64) -> Result<SarVariance> {
    let n = w.n();
    if lambda == 0.0 {
        return Ok(SarVariance::independent(n));
    }
    let a = sar_inverse(w, lambda)?;

    // A W, using the sparsity of W: column j of A W sums columns i of A with W_ij.
    let mut aw = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for (j, wij) in w.row(i) {
            aw.column_mut(j).axpy(wij, &a.column(i), 1.0);
        }
    }
    let awa = &aw * &a;

    let mut v = Vec::with_capacity(n);
    let mut v_prime = Vec::with_capacity(n);
    for i in 0..n {
        let row_a = a.row(i);
        let var = row_a.dot(&row_a);
        let vi = var.sqrt();
        if !(vi > 0.0 && vi.is_finite()) {
            return Err(Error::Numerical(format!("non-positive SAR variance at observation {i}")));
        }
        v.push(vi);
        v_prime.push(awa.row(i).dot(&row_a) / vi);
    }
    Ok(SarVariance { lambda, v, v_prime })
}

/// Draws `(I - lambda W)^{-1} eps` with `eps` i.i.d. standard normal.
pub fn simulate_sar_errors<R: Rng + ?Sized>(w: &WeightMatrix, lambda: f64, rng: &mut R) -> Result<Vec<f64>> {
    let n = w.n();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    if lambda == 0.0 {
        return Ok(eps);
    }
    let a = sar_inverse(w, lambda)?;
    let u = a * DVector::from_vec(eps);
    Ok(u.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Coordinates {
        Coordinates::new((0..n).map(|i| [i as f64, 0.0]).collect()).unwrap()
    }

    fn random_coords(n: usize, seed: u64) -> Coordinates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Coordinates::new((0..n).map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0]).collect()).unwrap()
    }

    fn two_node() -> WeightMatrix {
        WeightMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap()
    }

    #[test]
    fn knn_line_tie_break() {
        let w = build_knn_weights(&line(3), 1, true).unwrap();
        assert_eq!(w.row(0).collect::<Vec<_>>(), vec![(1, 1.0)]);
        assert_eq!(w.row(1).collect::<Vec<_>>(), vec![(0, 1.0)]);
        assert_eq!(w.row(2).collect::<Vec<_>>(), vec![(1, 1.0)]);
    }

    #[test]
    fn knn_rows_have_k_entries() {
        let w = build_knn_weights(&random_coords(40, 3), 6, true).unwrap();
        for i in 0..40 {
            assert_eq!(w.row_nnz(i), 6);
            assert!(w.row(i).all(|(j, _)| j != i));
            let s: f64 = w.row(i).map(|e| e.1).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        let raw = build_knn_weights(&random_coords(40, 3), 6, false).unwrap();
        assert!(raw.row(0).all(|(_, v)| v == 1.0));
    }

    #[test]
    fn knn_matches_brute_force() {
        let coords = random_coords(30, 11);
        let w = build_knn_weights(&coords, 3, true).unwrap();
        let p = coords.points();
        for i in 0..30 {
            let mut all: Vec<(f64, usize)> = (0..30)
                .filter(|&j| j != i)
                .map(|j| (((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt(), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut expected: Vec<usize> = all[..3].iter().map(|e| e.1).collect();
            expected.sort();
            let got: Vec<usize> = w.row(i).map(|e| e.0).collect();
            assert_eq!(got, expected, "row {i}");
        }
    }

    #[test]
    fn knn_errors() {
        assert!(matches!(build_knn_weights(&line(3), 3, true), Err(Error::Config(_))));
        let dup = Coordinates::new(vec![[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(build_knn_weights(&dup, 1, true), Err(Error::Data { .. })));
    }

    #[test]
    fn variance_at_zero_is_identity() {
        let w = build_knn_weights(&random_coords(25, 1), 4, true).unwrap();
        let sv = sar_variance(&w, 0.0).unwrap();
        assert!(sv.v.iter().all(|&x| x == 1.0));
        assert!(sv.v_prime.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_node_closed_form() {
        // v(lambda) = sqrt(1 + lambda^2) / (1 - lambda^2)
        let f = |l: f64| (1.0 + l * l).sqrt() / (1.0 - l * l);
        let df = |l: f64| {
            let s = (1.0 + l * l).sqrt();
            l / (s * (1.0 - l * l)) + 2.0 * l * s / (1.0 - l * l).powi(2)
        };
        let sv = sar_variance(&two_node(), 0.5).unwrap();
        for i in 0..2 {
            assert_relative_eq!(sv.v[i], 1.490712, epsilon = 1e-6);
            assert_relative_eq!(sv.v[i], f(0.5), max_relative = 1e-13);
            assert_relative_eq!(sv.v_prime[i], 2.583901, epsilon = 1e-6);
            assert_relative_eq!(sv.v_prime[i], df(0.5), max_relative = 1e-12);
        }
    }

    #[test]
    fn two_node_monotone_on_unit_interval() {
        let mut prev = 0.0;
        for k in 0..=90 {
            let v = sar_variance(&two_node(), k as f64 * 0.01).unwrap().v[0];
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let w = build_knn_weights(&random_coords(20, 5), 4, true).unwrap();
        let h = 1e-6;
        let sv = sar_variance(&w, 0.3).unwrap();
        let up = sar_variance(&w, 0.3 + h).unwrap();
        let dn = sar_variance(&w, 0.3 - h).unwrap();
        for i in 0..20 {
            let fd = (up.v[i] - dn.v[i]) / (2.0 * h);
            assert_relative_eq!(sv.v_prime[i], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn variance_positive_and_continuous_for_row_normalized() {
        let w = build_knn_weights(&random_coords(30, 8), 5, true).unwrap();
        let h = 0.01;
        let mut prev: Option<SarVariance> = None;
        for k in -95..=95 {
            let sv = sar_variance(&w, k as f64 * h).unwrap();
            assert!(sv.v.iter().all(|&v| v >= 0.5));
            if let Some(p) = prev {
                // Increments bounded by the slope at the interval ends.
                for i in 0..30 {
                    let slope = p.v_prime[i].abs().max(sv.v_prime[i].abs());
                    assert!((sv.v[i] - p.v[i]).abs() <= 1.5 * h * slope + 1e-12, "step {k}, obs {i}");
                }
            }
            prev = Some(sv);
        }
    }

    #[test]
    fn singular_system_reported() {
        // Row-normalized W has eigenvalue 1, so lambda = 1 makes I - W singular.
        let w = build_knn_weights(&random_coords(15, 2), 3, true).unwrap();
        match sar_variance(&w, 1.0) {
            Err(Error::SingularSar { lambda, .. }) => assert_eq!(lambda, 1.0),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn simulate_identity_at_zero() {
        let w = build_knn_weights(&random_coords(10, 2), 3, true).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let u = simulate_sar_errors(&w, 0.0, &mut a).unwrap();
        let eps: Vec<f64> = (0..10).map(|_| b.sample(StandardNormal)).collect();
        assert_eq!(u, eps);
    }

    #[test]
    fn simulated_variance_matches_diagonal() {
        let w = build_knn_weights(&random_coords(12, 4), 3, true).unwrap();
        let sv = sar_variance(&w, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let reps = 10_000;
        let mut sum = [0.0; 12];
        let mut sq = [0.0; 12];
        for _ in 0..reps {
            let u = simulate_sar_errors(&w, 0.5, &mut rng).unwrap();
            for i in 0..12 {
                sum[i] += u[i];
                sq[i] += u[i] * u[i];
            }
        }
        for i in 0..12 {
            let mean = sum[i] / reps as f64;
            let var = (sq[i] - reps as f64 * mean * mean) / (reps as f64 - 1.0);
            let target = sv.v[i] * sv.v[i];
            assert!((var - target).abs() <= 0.05 * target, "obs {i}: {var} vs {target}");
        }
    }

    #[test]
    fn triplet_text_round_trip() {
        let w = build_knn_weights(&random_coords(9, 6), 2, true).unwrap();
        let text = w.to_triplet_text();
        let back = WeightMatrix::from_triplet_text(9, text.as_bytes()).unwrap();
        assert_eq!(back, w);
        assert!(WeightMatrix::from_triplet_text(3, "0 1".as_bytes()).is_err());
        assert!(WeightMatrix::from_triplet_text(3, "1 1 0.5".as_bytes()).is_err());
    }
}
