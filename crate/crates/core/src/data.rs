//! Observations: binary response, linear covariates, smoothing covariate
//! and site coordinates, plus the CSV schema `y, x1..xp, z, sx, sy`.

use std::io::Read;

use crate::error::{Error, Result};
use crate::spatial::Coordinates;

/// Minimum number of rows accepted from a data file.
pub const MIN_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<bool>,
    /// Row-major `n x p` covariates.
    x: Vec<f64>,
    p: usize,
    z: Vec<f64>,
    coords: Option<Coordinates>,
}

impl Dataset {
    pub fn new(y: Vec<bool>, x: Vec<f64>, p: usize, z: Vec<f64>) -> Result<Self> {
        let n = y.len();
        if p == 0 {
            return Err(Error::data("at least one linear covariate is required"));
        }
        if x.len() != n * p || z.len() != n {
            return Err(Error::data(format!(
                "inconsistent lengths: {n} responses, {} covariate cells for p = {p}, {} z values",
                x.len(),
                z.len()
            )));
        }
        if n == 0 {
            return Err(Error::data("empty dataset"));
        }
        for i in 0..n {
            if x[i * p..(i + 1) * p].iter().any(|v| !v.is_finite()) || !z[i].is_finite() {
                return Err(Error::data_row(i + 1, "non-finite value"));
            }
        }
        Ok(Dataset { y, x, p, z, coords: None })
    }

    pub fn with_coordinates(mut self, coords: Coordinates) -> Result<Self> {
        if coords.len() != self.n() {
            return Err(Error::data(format!("{} coordinates for {} observations", coords.len(), self.n())));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[bool] {
        &self.y
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn coordinates(&self) -> Option<&Coordinates> {
        self.coords.as_ref()
    }

    /// `X_i' beta` for every row.
    pub fn linear_index(&self, beta: &[f64]) -> Vec<f64> {
        self.x.chunks_exact(self.p).map(|row| dot(row, beta)).collect()
    }

    /// Range of `z` over the sample.
    pub fn z_hull(&self) -> (f64, f64) {
        self.z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Reorders observations: new row `k` is old row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::Contract("permutation length differs from sample size".into()));
        }
        let y = perm.iter().map(|&i| self.y[i]).collect();
        let x = perm.iter().flat_map(|&i| self.x_row(i).iter().copied()).collect();
        let z = perm.iter().map(|&i| self.z[i]).collect();
        let mut out = Dataset::new(y, x, self.p, z)?;
        if let Some(c) = &self.coords {
            out.coords = Some(Coordinates::new(perm.iter().map(|&i| c.points()[i]).collect())?);
        }
        Ok(out)
    }

    /// Reads the CSV schema `y, x1..xp, z, sx, sy` (header required).
    /// Row numbers in errors count data rows from 1.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::data(format!("unreadable header: {e}")))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let p = names.len().saturating_sub(4);
        let expected: Vec<String> = std::iter::once("y".to_string())
            .chain((1..=p).map(|k| format!("x{k}")))
            .chain(["z", "sx", "sy"].map(String::from))
            .collect();
        if p == 0 || names != expected {
            return Err(Error::data(format!("header must be `{}`, got `{}`", expected.join(","), names.join(","))));
        }

        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut z = Vec::new();
        let mut pts = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 1;
            let rec = rec.map_err(|e| Error::data_row(row, e.to_string()))?;
            if rec.len() != names.len() {
                return Err(Error::data_row(row, format!("expected {} cells, got {}", names.len(), rec.len())));
            }
            let cell = |c: usize| -> Result<f64> {
                let s = &rec[c];
                if s.is_empty() {
                    return Err(Error::data_row(row, format!("missing value in column `{}`", names[c])));
                }
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::data_row(row, format!("invalid number `{s}` in column `{}`", names[c])))
            };
            y.push(match cell(0)? {
                0.0 => false,
                1.0 => true,
                v => return Err(Error::data_row(row, format!("y must be 0 or 1, got {v}"))),
            });
            for c in 1..=p {
                x.push(cell(c)?);
            }
            z.push(cell(p + 1)?);
            pts.push([cell(p + 2)?, cell(p + 3)?]);
        }
        if y.len() < MIN_ROWS {
            return Err(Error::data(format!("need at least {MIN_ROWS} rows, got {}", y.len())));
        }
        Dataset::new(y, x, p, z)?.with_coordinates(Coordinates::new(pts)?)
    }

    /// Writes the CSV schema read by [`Dataset::from_csv`].
    pub fn to_csv(&self) -> Result<String> {
        let coords = self
            .coords
            .as_ref()
            .ok_or_else(|| Error::Contract("dataset has no coordinates to write".into()))?;
        let mut out = String::from("y");
        for k in 1..=self.p {
            out.push_str(&format!(",x{k}"));
        }
        out.push_str(",z,sx,sy\n");
        for i in 0..self.n() {
            out.push_str(if self.y[i] { "1" } else { "0" });
            for v in self.x_row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            let s = coords.points()[i];
            out.push_str(&format!(",{:?},{:?},{:?}\n", self.z[i], s[0], s[1]));
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
