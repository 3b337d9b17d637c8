//! Bernoulli Gaussian-mixture prior: sampling, the scalar MMSE denoiser for
//! `r = g + N(0, nu_r)`, and the EM parameter refresh.
//!
//! Density: `lambda0 delta(g) + sum_l lambda_l N(g; mu_l, phi_l)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VAR_FLOOR: f64 = 1e-12;
pub const FREEZE_MASS: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgmParams {
    pub lambda0: f64,
    pub components: Vec<Component>,
}

impl BgmParams {
    pub fn new(lambda0: f64, components: Vec<Component>) -> Result<Self> {
        let p = BgmParams {
            lambda0,
            components,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |w: f64| (0.0..=1.0).contains(&w);
        if !in_unit(self.lambda0) || self.components.iter().any(|c| !in_unit(c.weight)) {
            return Err(Error::InvalidInput("mixture weights must lie in [0, 1]".into()));
        }
        if self
            .components
            .iter()
            .any(|c| !c.mean.is_finite() || !(c.var > 0.0) || !c.var.is_finite())
        {
            return Err(Error::InvalidInput(
                "component means must be finite and variances positive".into(),
            ));
        }
        let total = self.lambda0 + self.components.iter().map(|c| c.weight).sum::<f64>();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Default starting point: `L` components evenly spread over
    /// `[g_min, g_max]`, each with the variance of a uniform cell of width
    /// `(g_max - g_min) / L`.
    pub fn spread(g_min: f64, g_max: f64, num_components: usize, lambda0: f64) -> Self {
        let l = num_components.max(1);
        let width = (g_max - g_min).max(0.0);
        let var = ((width / l as f64).powi(2) / 12.0).max(VAR_FLOOR);
        let components = (1..=l)
            .map(|i| Component {
                weight: (1.0 - lambda0) / l as f64,
                mean: g_min + (2 * i - 1) as f64 / (2 * l) as f64 * width,
                var,
            })
            .collect();
        BgmParams {
            lambda0,
            components,
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * (c.var + c.mean * c.mean))
            .sum()
    }

    pub fn variance(&self) -> f64 {
        self.second_moment() - self.mean().powi(2)
    }

    /// Rescales all weights to sum to one.
    pub fn renormalize(&mut self) {
        let total = self.lambda0 + self.components.iter().map(|c| c.weight).sum::<f64>();
        if total > 0.0 {
            self.lambda0 /= total;
            self.components.iter_mut().for_each(|c| c.weight /= total);
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let spike = if x >= 0.0 { self.lambda0 } else { 0.0 };
        spike
            + self
                .components
                .iter()
                .map(|c| c.weight * crate::normal::cdf((x - c.mean) / c.var.sqrt()))
                .sum::<f64>()
    }
}

pub fn sample_bgm<R: Rng + ?Sized>(theta: &BgmParams, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    theta.validate()?;
    Ok((0..n)
        .map(|_| {
            let mut u: f64 = rng.random();
            if u < theta.lambda0 {
                return 0.0;
            }
            u -= theta.lambda0;
            let last = theta.components.len() - 1;
            let idx = theta
                .components
                .iter()
                .position(|c| {
                    if u < c.weight {
                        true
                    } else {
                        u -= c.weight;
                        false
                    }
                })
                .unwrap_or(last);
            let c = theta.components[idx];
            let z: f64 = rng.sample(StandardNormal);
            c.mean + c.var.sqrt() * z
        })
        .collect())
}

/// Per-entry posterior under the BGM prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub ghat: Vec<f64>,
    pub nu_g: Vec<f64>,
    /// Row-major `N x (L + 1)`: spike responsibility then one per component.
    pub responsibilities: Vec<f64>,
    /// Row-major `N x L` component posterior means.
    pub post_mean: Vec<f64>,
    /// Row-major `N x L` component posterior variances.
    pub post_var: Vec<f64>,
    /// Entries where every mixture term underflowed and the spike was used.
    pub fallbacks: usize,
}

/// Sufficient statistics for one EM refresh, accumulated entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmStats {
    count: usize,
    spike: f64,
    mass: Vec<f64>,
    weighted_mean: Vec<f64>,
    weighted_spread: Vec<f64>,
}

impl EmStats {
    pub fn new(num_components: usize) -> Self {
        EmStats {
            count: 0,
            spike: 0.0,
            mass: vec![0.0; num_components],
            weighted_mean: vec![0.0; num_components],
            weighted_spread: vec![0.0; num_components],
        }
    }

    pub fn clear(&mut self) {
        self.count = 0;
        self.spike = 0.0;
        self.mass.iter_mut().for_each(|v| *v = 0.0);
        self.weighted_mean.iter_mut().for_each(|v| *v = 0.0);
        self.weighted_spread.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Precomputed per-parameter constants for the scalar denoiser.
#[derive(Debug, Clone)]
pub struct Denoiser<'a> {
    theta: &'a BgmParams,
}

/// Result of denoising one entry.
#[derive(Debug, Clone, Copy)]
pub struct EntryPosterior {
    pub mean: f64,
    pub var: f64,
    pub fallback: bool,
}

impl<'a> Denoiser<'a> {
    pub fn new(theta: &'a BgmParams) -> Self {
        Denoiser { theta }
    }

    /// Posterior mean and variance of `g` given `r`, with responsibilities
    /// written to `resp` (`L + 1` slots) and component posteriors to
    /// `means` / `vars` (`L` slots each).
    pub fn entry(
        &self,
        r: f64,
        nu_r: f64,
        resp: &mut [f64],
        means: &mut [f64],
        vars: &mut [f64],
    ) -> EntryPosterior {
        let comps = &self.theta.components;
        // exponents first, then weight / sqrt(s) * exp(e - peak)
        let lambda0 = self.theta.lambda0;
        resp[0] = if lambda0 > 0.0 { -0.5 * r * r / nu_r } else { f64::NEG_INFINITY };
        for (l, c) in comps.iter().enumerate() {
            let s = nu_r + c.var;
            let d = r - c.mean;
            resp[l + 1] = if c.weight > 0.0 { -0.5 * d * d / s } else { f64::NEG_INFINITY };
            means[l] = (r * c.var + c.mean * nu_r) / s;
            vars[l] = nu_r * c.var / s;
        }
        let peak = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        if peak.is_finite() {
            resp[0] = lambda0 / nu_r.sqrt() * (resp[0] - peak).exp();
            total = resp[0];
            for (l, c) in comps.iter().enumerate() {
                let v = c.weight / (nu_r + c.var).sqrt() * (resp[l + 1] - peak).exp();
                resp[l + 1] = v;
                total += v;
            }
        }
        if !(total > 0.0 && total.is_finite()) {
            resp.iter_mut().for_each(|v| *v = 0.0);
            resp[0] = 1.0;
            return EntryPosterior {
                mean: 0.0,
                var: 0.0,
                fallback: true,
            };
        }
        let mut mean = 0.0;
        let mut second = 0.0;
        resp[0] /= total;
        for l in 0..comps.len() {
            resp[l + 1] /= total;
            mean += resp[l + 1] * means[l];
            second += resp[l + 1] * (vars[l] + means[l] * means[l]);
        }
        EntryPosterior {
            mean,
            var: (second - mean * mean).max(0.0),
            fallback: false,
        }
    }

    /// Adds one entry's responsibilities to the EM statistics.
    pub fn accumulate(&self, resp: &[f64], means: &[f64], vars: &[f64], stats: &mut EmStats) {
        stats.count += 1;
        stats.spike += resp[0];
        for (l, c) in self.theta.components.iter().enumerate() {
            let w = resp[l + 1];
            stats.mass[l] += w;
            stats.weighted_mean[l] += w * means[l];
            stats.weighted_spread[l] += w * ((c.mean - means[l]).powi(2) + vars[l]);
        }
    }
}

pub fn denoise(r: &[f64], nu_r: &[f64], theta: &BgmParams) -> Result<DenoiserOutput> {
    if r.len() != nu_r.len() {
        return Err(Error::dim("denoise", r.len(), nu_r.len()));
    }
    if let Some(bad) = nu_r.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidInput(format!("noise variance must be positive, got {bad}")));
    }
    let l = theta.num_components();
    let den = Denoiser::new(theta);
    let n = r.len();
    let mut out = DenoiserOutput {
        ghat: vec![0.0; n],
        nu_g: vec![0.0; n],
        responsibilities: vec![0.0; n * (l + 1)],
        post_mean: vec![0.0; n * l],
        post_var: vec![0.0; n * l],
        fallbacks: 0,
    };
    for i in 0..n {
        let post = den.entry(
            r[i],
            nu_r[i],
            &mut out.responsibilities[i * (l + 1)..(i + 1) * (l + 1)],
            &mut out.post_mean[i * l..(i + 1) * l],
            &mut out.post_var[i * l..(i + 1) * l],
        );
        out.ghat[i] = post.mean;
        out.nu_g[i] = post.var;
        out.fallbacks += usize::from(post.fallback);
    }
    if out.fallbacks > 0 {
        log::warn!("BGM denoiser fell back to the spike on {} entries", out.fallbacks);
    }
    Ok(out)
}

pub fn em_stats(out: &DenoiserOutput, theta: &BgmParams) -> EmStats {
    let l = theta.num_components();
    let den = Denoiser::new(theta);
    let mut stats = EmStats::new(l);
    for i in 0..out.ghat.len() {
        den.accumulate(
            &out.responsibilities[i * (l + 1)..(i + 1) * (l + 1)],
            &out.post_mean[i * l..(i + 1) * l],
            &out.post_var[i * l..(i + 1) * l],
            &mut stats,
        );
    }
    stats
}

/// EM refresh of the mixture from the denoiser's responsibilities. The
/// variance update measures spread about the current component means.
pub fn em_update(out: &DenoiserOutput, theta: &BgmParams) -> BgmParams {
    em_update_from_stats(&em_stats(out, theta), theta)
}

pub fn em_update_from_stats(stats: &EmStats, theta: &BgmParams) -> BgmParams {
    if stats.count == 0 {
        return theta.clone();
    }
    let n = stats.count as f64;
    let mut next = theta.clone();
    next.lambda0 = stats.spike / n;
    for (l, c) in next.components.iter_mut().enumerate() {
        let mass = stats.mass[l];
        c.weight = mass / n;
        if mass >= FREEZE_MASS {
            c.mean = stats.weighted_mean[l] / mass;
            c.var = (stats.weighted_spread[l] / mass).max(VAR_FLOOR);
        }
    }
    next.renormalize();
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn three_component() -> BgmParams {
        BgmParams::new(
            0.6,
            vec![
                Component { weight: 0.15, mean: -1.0, var: 0.3 },
                Component { weight: 0.15, mean: 0.5, var: 0.1 },
                Component { weight: 0.1, mean: 2.0, var: 0.5 },
            ],
        )
        .unwrap()
    }

    /// Composite Simpson on [lo, hi] with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn pure_spike_prior() {
        let theta = BgmParams::new(1.0, vec![Component { weight: 0.0, mean: 1.0, var: 1.0 }]).unwrap();
        let out = denoise(&[0.3, -2.0, 5.0], &[0.5; 3], &theta).unwrap();
        assert!(out.ghat.iter().all(|&g| g == 0.0));
        assert!(out.nu_g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conjugate_gaussian_posterior() {
        let (mu, phi) = (0.7, 2.0);
        let theta = BgmParams::new(0.0, vec![Component { weight: 1.0, mean: mu, var: phi }]).unwrap();
        let r = [1.5, -0.2];
        let nu = [0.4, 3.0];
        let out = denoise(&r, &nu, &theta).unwrap();
        for i in 0..2 {
            assert_relative_eq!(out.ghat[i], (r[i] * phi + mu * nu[i]) / (nu[i] + phi), epsilon = 1e-14);
            assert_relative_eq!(out.nu_g[i], nu[i] * phi / (nu[i] + phi), epsilon = 1e-14);
        }
    }

    #[test]
    fn matches_quadrature_oracle() {
        let theta = three_component();
        for &(r, nu) in &[(0.9, 0.2), (-1.7, 0.05), (3.1, 1.3), (0.02, 0.01)] {
            // continuous part by quadrature, spike part exactly
            let lik = |g: f64| (-(r - g) * (r - g) / (2.0 * nu)).exp() / (2.0 * std::f64::consts::PI * nu).sqrt();
            let slab = |g: f64| {
                theta
                    .components
                    .iter()
                    .map(|c| c.weight * (-(g - c.mean).powi(2) / (2.0 * c.var)).exp() / (2.0 * std::f64::consts::PI * c.var).sqrt())
                    .sum::<f64>()
            };
            let z = theta.lambda0 * lik(0.0) + simpson(|g| slab(g) * lik(g), -15.0, 15.0, 200_000);
            let m1 = simpson(|g| g * slab(g) * lik(g), -15.0, 15.0, 200_000) / z;
            let m2 = simpson(|g| g * g * slab(g) * lik(g), -15.0, 15.0, 200_000) / z;
            let out = denoise(&[r], &[nu], &theta).unwrap();
            assert!((out.ghat[0] - m1).abs() < 1e-6, "mean {r}: {} vs {m1}", out.ghat[0]);
            assert!((out.nu_g[0] - (m2 - m1 * m1)).abs() < 1e-6);
            let total: f64 = out.responsibilities.iter().sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sign_flip_equivariance() {
        let theta = BgmParams::new(
            0.5,
            vec![
                Component { weight: 0.25, mean: -1.0, var: 0.2 },
                Component { weight: 0.25, mean: 1.0, var: 0.2 },
            ],
        )
        .unwrap();
        let r = [0.4, -1.3, 2.2];
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let a = denoise(&r, &[0.3; 3], &theta).unwrap();
        let b = denoise(&neg, &[0.3; 3], &theta).unwrap();
        for i in 0..3 {
            assert_relative_eq!(a.ghat[i], -b.ghat[i], epsilon = 1e-14);
            assert_relative_eq!(a.nu_g[i], b.nu_g[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn averaged_posterior_variance_below_prior() {
        // law of total variance: E[Var(g | r)] <= Var(g)
        let theta = three_component();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let g = sample_bgm(&theta, 20_000, &mut rng).unwrap();
        let nu = 0.3;
        let r: Vec<f64> = g
            .iter()
            .map(|v| v + nu_sqrt(nu) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let out = denoise(&r, &vec![nu; r.len()], &theta).unwrap();
        let mean_post_var = out.nu_g.iter().sum::<f64>() / r.len() as f64;
        assert!(mean_post_var < theta.variance());
        assert!(out.nu_g.iter().all(|v| *v >= 0.0));
    }

    fn nu_sqrt(v: f64) -> f64 {
        v.sqrt()
    }

    #[test]
    fn spike_only_responsibilities_give_full_spike() {
        let theta = three_component();
        let out = DenoiserOutput {
            ghat: vec![0.0; 4],
            nu_g: vec![0.0; 4],
            responsibilities: [1.0, 0.0, 0.0, 0.0].repeat(4),
            post_mean: vec![0.0; 12],
            post_var: vec![0.1; 12],
            fallbacks: 0,
        };
        let next = em_update(&out, &theta);
        assert_relative_eq!(next.lambda0, 1.0);
        // vanishing responsibility freezes the component shape
        for (a, b) in next.components.iter().zip(&theta.components) {
            assert_eq!(a.weight, 0.0);
            assert_eq!((a.mean, a.var), (b.mean, b.var));
        }
    }

    #[test]
    fn em_update_permutes_with_components() {
        let theta = three_component();
        let mut perm = theta.clone();
        perm.components.rotate_left(1);
        let r = [0.3, -1.2, 2.5, 0.0, 0.8];
        let nu = [0.2; 5];
        let a = em_update(&denoise(&r, &nu, &theta).unwrap(), &theta);
        let b = em_update(&denoise(&r, &nu, &perm).unwrap(), &perm);
        let mut rotated = a.components.clone();
        rotated.rotate_left(1);
        for (x, y) in rotated.iter().zip(&b.components) {
            assert_relative_eq!(x.weight, y.weight, epsilon = 1e-14);
            assert_relative_eq!(x.mean, y.mean, epsilon = 1e-12);
            assert_relative_eq!(x.var, y.var, epsilon = 1e-12);
        }
        assert_relative_eq!(a.lambda0, b.lambda0, epsilon = 1e-14);
    }

    #[test]
    fn em_recovers_known_mixture() {
        let truth = BgmParams::new(0.8, vec![Component { weight: 0.2, mean: 1.5, var: 0.4 }]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let g = sample_bgm(&truth, 100_000, &mut rng).unwrap();
        let nu: f64 = 0.01;
        let r: Vec<f64> = g
            .iter()
            .map(|v| v + nu.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let nus = vec![nu; r.len()];
        let mut theta = BgmParams::new(0.5, vec![Component { weight: 0.5, mean: 0.5, var: 1.0 }]).unwrap();
        for _ in 0..20 {
            let out = denoise(&r, &nus, &theta).unwrap();
            theta = em_update(&out, &theta);
            theta.validate().unwrap();
        }
        let c = theta.components[0];
        assert!((theta.lambda0 - 0.8).abs() / 0.8 < 0.05, "{theta:?}");
        assert!((c.mean - 1.5).abs() / 1.5 < 0.05, "{theta:?}");
        assert!((c.var - 0.4).abs() / 0.4 < 0.05, "{theta:?}");
    }

    #[test]
    fn sampler_statistics() {
        let theta = BgmParams::new(0.9, vec![Component { weight: 0.1, mean: 2.0, var: 0.5 }]).unwrap();
        let n = 200_000;
        let draw = |seed| sample_bgm(&theta, n, &mut ChaCha12Rng::seed_from_u64(seed)).unwrap();
        let x = draw(3);
        assert_eq!(x, draw(3));
        let zeros = x.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.9).abs() < 3.0 * (0.09 / n as f64).sqrt());
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - theta.mean()).abs() < 3.0 * (theta.variance() / n as f64).sqrt());
        assert!((var - theta.variance()).abs() / theta.variance() < 0.02);
    }

    #[test]
    fn spread_initialisation() {
        let theta = BgmParams::spread(-3.0, 3.0, 3, 0.9);
        theta.validate().unwrap();
        let means: Vec<f64> = theta.components.iter().map(|c| c.mean).collect();
        assert_eq!(means, vec![-2.0, 0.0, 2.0]);
        assert_relative_eq!(theta.components[0].var, 4.0 / 12.0);
        assert_relative_eq!(theta.components[0].weight, 0.1 / 3.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(BgmParams::new(0.5, vec![Component { weight: 0.4, mean: 0.0, var: 1.0 }]).is_err());
        assert!(BgmParams::new(0.5, vec![Component { weight: 0.5, mean: 0.0, var: 0.0 }]).is_err());
        assert!(denoise(&[1.0], &[0.0], &three_component()).is_err());
    }
}
