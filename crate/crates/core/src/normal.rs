//! Standard normal special functions and truncated-normal moments.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail probability `Q(x) = P(Z > x)`.
pub fn q_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Scaled complementary error function `exp(x^2) erfc(x)` for `x >= 0`.
pub fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 10.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        // asymptotic series, summed until the terms stop mattering
        let t = 1.0 / (2.0 * x * x);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..60 {
            term *= -((2 * k - 1) as f64) * t;
            sum += term;
            if term.abs() < 1e-17 * sum {
                break;
            }
        }
        sum / (x * PI.sqrt())
    }
}

/// Inverse of `cdf` for `p` in `(0, 1)`: bisection then Newton polishing.
pub fn quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0, 1), got {p}");
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        let d = pdf(x);
        if d > 0.0 {
            x -= (cdf(x) - p) / d;
        }
    }
    x
}

/// Log-density of `N(x; mean, var)`.
pub fn log_gauss(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (d * d / var + (2.0 * PI * var).ln())
}

/// Mean and variance of a standard normal truncated to `(lo, hi]`.
///
/// Stable in the far tails (Mills-ratio form through `erfcx`) and for very
/// narrow intervals (Gauss-Legendre on the recentred density). Returns `None`
/// when the interval carries no representable mass.
pub fn truncated_moments(lo: f64, hi: f64) -> Option<(f64, f64)> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return None;
    }
    if lo.is_finite() && hi.is_finite() {
        let c = 0.5 * (lo + hi);
        let h = 0.5 * (hi - lo);
        if h * (c.abs() + h) <= 1.0 {
            return Some(narrow_moments(c, h));
        }
    }
    if hi <= 0.0 {
        return tail_moments(-hi, -lo).map(|(m, v)| (-m, v));
    }
    if lo >= 0.0 {
        return tail_moments(lo, hi);
    }
    // interval straddles zero: mass is at least min(Phi(hi) - 1/2, 1/2 - Phi(lo)) > 0
    let mass = cdf(hi) - cdf(lo);
    let (plo, phi) = (pdf(lo), pdf(hi));
    let lo_term = if lo.is_finite() { lo * plo } else { 0.0 };
    let hi_term = if hi.is_finite() { hi * phi } else { 0.0 };
    let mean = (plo - phi) / mass;
    let second = 1.0 + (lo_term - hi_term) / mass;
    Some((mean, (second - mean * mean).max(0.0)))
}

/// `0 <= lo < hi <= inf`; all quantities scaled by `exp(lo^2 / 2)`.
fn tail_moments(lo: f64, hi: f64) -> Option<(f64, f64)> {
    let q_lo = 0.5 * erfcx(lo * FRAC_1_SQRT_2);
    let (q_hi, p_hi, hi_term) = if hi.is_finite() {
        let decay = (-0.5 * (hi - lo) * (hi + lo)).exp();
        (
            0.5 * erfcx(hi * FRAC_1_SQRT_2) * decay,
            INV_SQRT_2PI * decay,
            hi * INV_SQRT_2PI * decay,
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let mass = q_lo - q_hi;
    if !(mass > 0.0) || !mass.is_finite() {
        return None;
    }
    let mean = (INV_SQRT_2PI - p_hi) / mass;
    let second = 1.0 + (lo * INV_SQRT_2PI - hi_term) / mass;
    Some((mean, (second - mean * mean).max(0.0)))
}

fn narrow_moments(c: f64, h: f64) -> (f64, f64) {
    let (nodes, weights) = gauss_legendre_20();
    let mut z = 0.0;
    let mut s1 = 0.0;
    for (&x, &w) in nodes.iter().zip(weights) {
        let u = h * x;
        let dens = w * (-c * u - 0.5 * u * u).exp();
        z += dens;
        s1 += dens * u;
    }
    let mu = s1 / z;
    let mut s2 = 0.0;
    for (&x, &w) in nodes.iter().zip(weights) {
        let u = h * x;
        let dens = w * (-c * u - 0.5 * u * u).exp();
        s2 += dens * (u - mu) * (u - mu);
    }
    (c + mu, s2 / z)
}

/// 20-point Gauss-Legendre rule on [-1, 1].
pub(crate) fn gauss_legendre_20() -> (&'static [f64], &'static [f64]) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    let (n, w) = RULE.get_or_init(|| gauss_legendre(20));
    (n, w)
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cdf_and_tail_agree() {
        for &x in &[-5.0, -1.3, 0.0, 0.7, 3.0, 8.0] {
            assert_relative_eq!(cdf(x) + q_tail(x), 1.0, epsilon = 1e-15);
        }
        assert_relative_eq!(cdf(0.0), 0.5, epsilon = 1e-16);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-10, 0.02, 0.5, 0.8413447460685429, 0.999] {
            assert_relative_eq!(cdf(quantile(p)), p, max_relative = 1e-12);
        }
        assert_relative_eq!(quantile(0.8413447460685429), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn erfcx_is_continuous_across_the_switch() {
        let below = erfcx(10.0 - 1e-12);
        let above = erfcx(10.0);
        assert_relative_eq!(below, above, max_relative = 1e-12);
        assert_relative_eq!(erfcx(0.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (n, w) = gauss_legendre_20();
        let total: f64 = w.iter().sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-14);
        let x38: f64 = n.iter().zip(w).map(|(x, w)| w * x.powi(38)).sum();
        assert_relative_eq!(x38, 2.0 / 39.0, max_relative = 1e-12);
    }

    #[test]
    fn half_line_moments() {
        let (m, v) = truncated_moments(0.0, f64::INFINITY).unwrap();
        assert_relative_eq!(m, (2.0 / PI).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(v, 1.0 - 2.0 / PI, epsilon = 1e-14);
        let (m, v) = truncated_moments(f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_relative_eq!(m, 0.0, epsilon = 1e-15);
        assert_relative_eq!(v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn far_tail_moments_follow_mills_ratio() {
        // E[Z | Z > a] ~ a + 1/a for large a
        let (m, v) = truncated_moments(40.0, f64::INFINITY).unwrap();
        assert!((m - 40.0 - 1.0 / 40.0).abs() < 1e-4);
        assert!(v > 0.0 && v < 1e-3);
        let (m2, _) = truncated_moments(f64::NEG_INFINITY, -40.0).unwrap();
        assert_relative_eq!(m2, -m, epsilon = 1e-12);
    }

    #[test]
    fn narrow_interval_is_nearly_uniform() {
        let w = 1e-6;
        let (m, v) = truncated_moments(1.0, 1.0 + w).unwrap();
        assert_relative_eq!(m, 1.0 + w / 2.0, epsilon = 1e-12);
        assert_relative_eq!(v, w * w / 12.0, max_relative = 1e-5);
    }

    #[test]
    fn empty_interval_is_rejected() {
        assert!(truncated_moments(1.0, 1.0).is_none());
        assert!(truncated_moments(2.0, 1.0).is_none());
    }
}
