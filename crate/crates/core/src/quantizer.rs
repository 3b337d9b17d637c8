//! Scalar quantizer matched to a standard normal input.
//!
//! The quantizer maps `x` to level `q_i` iff `x` lies in `(tau_{i-1}, tau_i]`.
//! Levels are the Lloyd-Max fixed point for `N(0, 1)`, which makes the design
//! independent of device, block and round: every device and the server share
//! the same table without exchanging it.

use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::normal;

pub const MAX_BITS: u32 = 8;
pub const DESIGN_TOL: f64 = 1e-10;
pub const DESIGN_MAX_ITER: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    bits: u32,
    levels: Vec<f64>,
    /// `2^bits + 1` entries, first `-inf`, last `+inf`.
    thresholds: Vec<f64>,
    gamma: f64,
    psi: f64,
    kappa: f64,
}

/// Bussgang gain `gamma`, output power `psi` and the distortion-to-signal ratio
/// `kappa = (psi - gamma^2) / gamma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BussgangConstants {
    pub gamma: f64,
    pub psi: f64,
    pub kappa: f64,
}

#[derive(Debug, Serialize)]
struct QuantizerDump<'a> {
    bits: u32,
    levels: &'a [f64],
    thresholds: &'a [f64],
    gamma: f64,
    psi: f64,
    kappa: f64,
    mse: f64,
}

impl QuantizerSpec {
    /// Builds a quantizer from strictly increasing levels using nearest-neighbour
    /// thresholds (interval midpoints).
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 || !levels.len().is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "level count must be a power of two >= 2, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|l| !l.is_finite()) || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "levels must be finite and strictly increasing".into(),
            ));
        }
        let bits = levels.len().trailing_zeros();
        let mut spec = QuantizerSpec {
            bits,
            thresholds: midpoint_thresholds(&levels),
            levels,
            gamma: 0.0,
            psi: 0.0,
            kappa: 0.0,
        };
        let c = bussgang_constants(&spec);
        spec.gamma = c.gamma;
        spec.psi = c.psi;
        spec.kappa = c.kappa;
        Ok(spec)
    }

    /// Cached Lloyd-Max design for `bits` (1..=8) at the default tolerance.
    pub fn lloyd_max(bits: u32) -> Result<&'static QuantizerSpec> {
        static CACHE: [OnceLock<QuantizerSpec>; MAX_BITS as usize] =
            [const { OnceLock::new() }; MAX_BITS as usize];
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::config("bits", format!("must be in 1..={MAX_BITS}, got {bits}")));
        }
        let cell = &CACHE[bits as usize - 1];
        if let Some(spec) = cell.get() {
            return Ok(spec);
        }
        let spec = design_lloyd_max(bits, DESIGN_TOL, DESIGN_MAX_ITER)?;
        Ok(cell.get_or_init(|| spec))
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn level(&self, index: usize) -> f64 {
        self.levels[index]
    }

    /// Decision interval `(tau_{i-1}, tau_i]` of level `index`.
    pub fn interval(&self, index: usize) -> (f64, f64) {
        (self.thresholds[index], self.thresholds[index + 1])
    }

    pub fn constants(&self) -> BussgangConstants {
        BussgangConstants {
            gamma: self.gamma,
            psi: self.psi,
            kappa: self.kappa,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Mean squared quantization error for `x ~ N(0, 1)`: `1 - 2 gamma + psi`.
    pub fn mse(&self) -> f64 {
        1.0 - 2.0 * self.gamma + self.psi
    }

    /// Level index of `x`. Points exactly on a threshold map to the lower level.
    pub fn index_of(&self, x: f64) -> Result<usize> {
        if x.is_nan() {
            return Err(Error::InvalidInput("cannot quantize NaN".into()));
        }
        let interior = &self.thresholds[1..self.thresholds.len() - 1];
        Ok(interior.partition_point(|&t| t < x))
    }

    pub fn quantize_indices(&self, x: &[f64]) -> Result<Vec<u8>> {
        debug_assert!(self.bits <= 8);
        x.iter().map(|&v| self.index_of(v).map(|i| i as u8)).collect()
    }

    pub fn quantize(&self, x: &[f64]) -> Result<Vec<f64>> {
        x.iter()
            .map(|&v| self.index_of(v).map(|i| self.levels[i]))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let dump = QuantizerDump {
            bits: self.bits,
            levels: &self.levels,
            thresholds: &self.thresholds[1..self.thresholds.len() - 1],
            gamma: self.gamma,
            psi: self.psi,
            kappa: self.kappa,
            mse: self.mse(),
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }
}

fn midpoint_thresholds(levels: &[f64]) -> Vec<f64> {
    let mut t = Vec::with_capacity(levels.len() + 1);
    t.push(f64::NEG_INFINITY);
    t.extend(levels.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    t.push(f64::INFINITY);
    t
}

/// Lloyd-Max design for `N(0, 1)` by alternating the nearest-neighbour and
/// centroid conditions until the largest level move drops below `tol`.
pub fn design_lloyd_max(bits: u32, tol: f64, max_iter: usize) -> Result<QuantizerSpec> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::config("bits", format!("must be in 1..={MAX_BITS}, got {bits}")));
    }
    if !(tol > 0.0) {
        return Err(Error::config("tol", "must be positive"));
    }
    let n = 1usize << bits;
    // start from the compander law: levels at quantiles of N(0, 3)
    let mut levels: Vec<f64> = (0..n)
        .map(|i| 3f64.sqrt() * normal::quantile((i as f64 + 0.5) / n as f64))
        .collect();
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let (centroids, jac) = centroid_step(&levels);
        change = centroids
            .iter()
            .zip(&levels)
            .fold(0.0, |m, (c, y)| f64::max(m, (c - y).abs()));
        if change < tol {
            levels = centroids;
            symmetrize(&mut levels);
            return QuantizerSpec::from_levels(levels);
        }
        // Newton on y = c(y); the plain Lloyd update is the fallback
        let residual: Vec<f64> = centroids.iter().zip(&levels).map(|(c, y)| c - y).collect();
        let next = solve_newton(&jac, &residual)
            .map(|d| levels.iter().zip(d).map(|(y, d)| y + d).collect::<Vec<_>>())
            .filter(|y| y.windows(2).all(|w| w[0] < w[1]) && y.iter().all(|v| v.is_finite()));
        levels = next.unwrap_or(centroids);
    }
    Err(Error::NotConverged {
        bits,
        iterations: max_iter,
        last_change: change,
        last_levels: levels,
    })
}

/// Cell centroids for the midpoint partition of `levels`, and the three
/// diagonals of their derivative with respect to the levels.
fn centroid_step(levels: &[f64]) -> (Vec<f64>, [Vec<f64>; 3]) {
    let t = midpoint_thresholds(levels);
    let n = levels.len();
    let mut c = vec![0.0; n];
    let (mut lower, mut diag, mut upper) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (a, b) = (t[i], t[i + 1]);
        let (mean, _) = normal::truncated_moments(a, b).expect("Lloyd-Max cells have positive mass");
        c[i] = mean;
        let mass = normal::cdf(b) - normal::cdf(a);
        if mass <= 0.0 {
            continue;
        }
        let da = if a.is_finite() { normal::pdf(a) * (mean - a) / mass } else { 0.0 };
        let db = if b.is_finite() { normal::pdf(b) * (b - mean) / mass } else { 0.0 };
        lower[i] = 0.5 * da;
        diag[i] = 0.5 * (da + db);
        upper[i] = 0.5 * db;
    }
    (c, [lower, diag, upper])
}

/// Solves `(I - J) d = r` for tridiagonal `J` (Thomas algorithm).
fn solve_newton(jac: &[Vec<f64>; 3], r: &[f64]) -> Option<Vec<f64>> {
    let n = r.len();
    let [lower, diag, upper] = jac;
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    for i in 0..n {
        let a = if i > 0 { -lower[i] } else { 0.0 };
        let b = 1.0 - diag[i];
        let denom = b - if i > 0 { a * cp[i - 1] } else { 0.0 };
        if denom.abs() < 1e-300 {
            return None;
        }
        cp[i] = -upper[i] / denom;
        dp[i] = (r[i] - if i > 0 { a * dp[i - 1] } else { 0.0 }) / denom;
    }
    let mut d = vec![0.0; n];
    for i in (0..n).rev() {
        d[i] = dp[i] - if i + 1 < n { cp[i] * d[i + 1] } else { 0.0 };
    }
    Some(d)
}

/// Averages mirrored pairs so the table is exactly odd-symmetric.
fn symmetrize(levels: &mut [f64]) {
    let n = levels.len();
    for i in 0..n / 2 {
        let m = 0.5 * (levels[n - 1 - i] - levels[i]);
        levels[i] = -m;
        levels[n - 1 - i] = m;
    }
}

/// `gamma = sum_i q_i (phi(tau_{i-1}) - phi(tau_i))`,
/// `psi = sum_i q_i^2 (Phi(tau_i) - Phi(tau_{i-1}))`.
pub fn bussgang_constants(spec: &QuantizerSpec) -> BussgangConstants {
    let t = &spec.thresholds;
    let mut gamma = 0.0;
    let mut psi = 0.0;
    for (i, &q) in spec.levels.iter().enumerate() {
        let (lo, hi) = (t[i], t[i + 1]);
        let dens = |x: f64| if x.is_finite() { normal::pdf(x) } else { 0.0 };
        gamma += q * (dens(lo) - dens(hi));
        // probability of the cell, computed on the side that avoids cancellation
        let mass = if lo >= 0.0 {
            normal::q_tail(lo) - normal::q_tail(hi)
        } else {
            normal::cdf(hi) - normal::cdf(lo)
        };
        psi += q * q * mass;
    }
    BussgangConstants {
        gamma,
        psi,
        kappa: (psi - gamma * gamma) / (gamma * gamma),
    }
}
