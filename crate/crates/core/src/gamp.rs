//! Generalized approximate message passing with a Bernoulli Gaussian-mixture
//! prior, EM-learned, and two output channels: the quantized channel of the
//! device payloads and the AWGN channel of the Bussgang-aggregated
//! measurements.
//!
//! A recovery targets `g` observed through `x = alpha A g`. Internally the
//! iteration runs on `z = alpha g`, where `x = A z` has unit-variance entries;
//! this is the same recursion as running on `g` with the effective matrix
//! `alpha A`, but keeps the variance floors scale-free. Estimates and prior
//! parameters are mapped back to `g` units on return.
//!
//! Many recoveries sharing one sensing matrix are advanced in lockstep so the
//! four matrix products per iteration become matrix-matrix products. Each
//! instance keeps its own state, prior and stopping decision, so results do
//! not depend on which other instances share the batch.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ShapeBuilder};
use rand::Rng;
use rayon::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bgm::{BgmParams, Component, Denoiser, EmStats};
use crate::error::{Error, Result};
use crate::normal;
use crate::quantizer::QuantizerSpec;
use crate::rng;
use crate::sensing::SensingMatrix;

/// Floor applied to `nu_p`, `nu_r` and `nu_s` (normalised units).
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GampOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub em: bool,
    pub num_components: usize,
    pub lambda0_init: f64,
}

impl Default for GampOptions {
    fn default() -> Self {
        GampOptions {
            max_iter: 50,
            tol: 1e-5,
            em: true,
            num_components: 3,
            lambda0_init: 0.9,
        }
    }
}

impl GampOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::config("gamp.max_iter", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("gamp.tol", "must be positive"));
        }
        if self.num_components == 0 {
            return Err(Error::config("gamp.num_components", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.lambda0_init) {
            return Err(Error::config("gamp.lambda0_init", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How the measurements relate to `x = A z`.
#[derive(Debug, Clone, Copy)]
pub enum OutputChannel<'a> {
    /// `q_m` is the quantizer cell containing `x_m`.
    Quantized {
        indices: &'a [u8],
        spec: &'a QuantizerSpec,
    },
    /// `y_m = x_m + N(0, nu_d)`.
    Awgn { y: &'a [f64], nu_d: f64 },
}

impl OutputChannel<'_> {
    pub fn len(&self) -> usize {
        match self {
            OutputChannel::Quantized { indices, .. } => indices.len(),
            OutputChannel::Awgn { y, .. } => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Posterior mean and variance of `x_m` under the prior `N(phat, nu_p)`.
    pub fn posterior(&self, m: usize, phat: f64, nu_p: f64) -> (f64, f64) {
        match *self {
            OutputChannel::Quantized { indices, spec } => {
                let (lo, hi) = spec.interval(indices[m] as usize);
                quantized_posterior(lo, hi, phat, nu_p)
            }
            OutputChannel::Awgn { y, nu_d } => awgn_posterior(y[m], nu_d, phat, nu_p),
        }
    }
}

/// Posterior moments of `x ~ N(phat, nu_p)` given `x` in `(lo, hi]`.
///
/// This is the truncated-normal form of `phat + nu_p p'/p` and
/// `nu_p^2 (p''/p - (p'/p)^2) + nu_p`. If the interval carries no
/// representable mass the midpoint (or the finite edge) is returned with
/// variance `1e-6 nu_p`.
pub fn quantized_posterior(lo: f64, hi: f64, phat: f64, nu_p: f64) -> (f64, f64) {
    let sd = nu_p.sqrt();
    let a = (lo - phat) / sd;
    let b = (hi - phat) / sd;
    match normal::truncated_moments(a, b) {
        Some((m, v)) => (phat + sd * m, nu_p * v),
        None => {
            log::debug!("degenerate quantizer cell ({lo}, {hi}] for prior N({phat}, {nu_p})");
            let x = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo,
                (false, true) => hi,
                (false, false) => phat,
            };
            (x, nu_p * 1e-6)
        }
    }
}

pub fn awgn_posterior(y: f64, nu_d: f64, phat: f64, nu_p: f64) -> (f64, f64) {
    (
        (phat * nu_d + y * nu_p) / (nu_p + nu_d),
        1.0 / (1.0 / nu_p + 1.0 / nu_d),
    )
}

/// Iterate state in normalised units.
#[derive(Debug, Clone, PartialEq)]
pub struct GampState {
    pub ghat: Vec<f64>,
    pub nu_g: Vec<f64>,
    pub shat: Vec<f64>,
    pub phat: Vec<f64>,
    pub nu_p: Vec<f64>,
    pub rhat: Vec<f64>,
    pub nu_r: Vec<f64>,
    pub iter: usize,
}

impl GampState {
    pub fn is_finite(&self) -> bool {
        [
            &self.ghat, &self.nu_g, &self.shat, &self.phat, &self.nu_p, &self.rhat, &self.nu_r,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Random start `g_n ~ N(0, M / (N alpha^2))`, `nu_g = M / (N alpha^2)`,
/// `s = 0`, and the spread prior over the drawn estimates. State is returned in
/// normalised units (`alpha = 1`); the prior in `g` units.
pub fn init_gamp<R: Rng + ?Sized>(
    alpha: f64,
    m: usize,
    n: usize,
    opts: &GampOptions,
    rng: &mut R,
) -> Result<(GampState, BgmParams)> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("gain must be positive and finite, got {alpha}")));
    }
    let var = m as f64 / n as f64;
    let sd = var.sqrt();
    let ghat: Vec<f64> = (0..n)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (lo, hi) = ghat
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let theta = BgmParams::spread(lo, hi, opts.num_components, opts.lambda0_init);
    let state = GampState {
        ghat,
        nu_g: vec![var; n],
        shat: vec![0.0; m],
        phat: vec![0.0; m],
        nu_p: vec![0.0; m],
        rhat: vec![0.0; n],
        nu_r: vec![0.0; n],
        iter: 0,
    };
    Ok((state, scale_params(&theta, 1.0 / alpha)))
}

/// One recovery problem.
#[derive(Debug, Clone)]
pub struct GampProblem<'a> {
    pub channel: OutputChannel<'a>,
    /// Gain relating the target to the measurements: `x = alpha A g`.
    pub alpha: f64,
    /// Starting prior in `g` units; `None` uses the spread initialisation.
    pub theta0: Option<BgmParams>,
    /// Seed of the random starting point.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GampOutcome {
    pub ghat: Vec<f64>,
    pub theta: BgmParams,
    pub iterations: usize,
    pub converged: bool,
    /// A non-finite value appeared; `ghat` is the last finite iterate.
    pub diverged: bool,
    /// Relative change `||g_old - g||^2 / ||g_old||^2` per iteration.
    pub residuals: Vec<f64>,
    pub denoiser_fallbacks: usize,
}

pub fn run_gamp(problem: GampProblem<'_>, a: &SensingMatrix, opts: &GampOptions) -> Result<GampOutcome> {
    Ok(run_gamp_batch(std::slice::from_ref(&problem), a, opts)?
        .pop()
        .expect("one outcome per problem"))
}

/// `(lambda0, {w, mu, phi})` -> `(lambda0, {w, c mu, c^2 phi})`.
pub fn scale_params(theta: &BgmParams, c: f64) -> BgmParams {
    BgmParams {
        lambda0: theta.lambda0,
        components: theta
            .components
            .iter()
            .map(|comp| Component {
                weight: comp.weight,
                mean: comp.mean * c,
                var: comp.var * c * c,
            })
            .collect(),
    }
}

struct Instance<'a> {
    channel: OutputChannel<'a>,
    alpha: f64,
    state: GampState,
    nu_s: Vec<f64>,
    theta: BgmParams,
    last_finite: Vec<f64>,
    residuals: Vec<f64>,
    converged: bool,
    diverged: bool,
    fallbacks: usize,
}

impl Instance<'_> {
    fn active(&self) -> bool {
        !self.converged && !self.diverged
    }
}

pub fn run_gamp_batch(
    problems: &[GampProblem<'_>],
    a: &SensingMatrix,
    opts: &GampOptions,
) -> Result<Vec<GampOutcome>> {
    opts.validate()?;
    let (m, n) = (a.rows(), a.cols());
    let mut instances = Vec::with_capacity(problems.len());
    for p in problems {
        if p.channel.len() != m {
            return Err(Error::dim("gamp measurements", m, p.channel.len()));
        }
        let mut rng = rng::stream(p.seed, "gamp-init", &[]);
        let (state, theta) = init_gamp(p.alpha, m, n, opts, &mut rng)?;
        let theta = match &p.theta0 {
            Some(t) => {
                t.validate()?;
                t.clone()
            }
            None => theta,
        };
        instances.push(Instance {
            channel: p.channel,
            alpha: p.alpha,
            last_finite: state.ghat.clone(),
            state,
            nu_s: vec![0.0; m],
            // the iteration works on z = alpha g
            theta: scale_params(&theta, p.alpha),
            residuals: Vec::new(),
            converged: false,
            diverged: false,
            fallbacks: 0,
        });
    }

    // instances are independent, so chunking only affects speed
    let chunk = instances.len().div_ceil(rayon::current_num_threads()).max(1);
    instances.par_chunks_mut(chunk).for_each(|part| {
        for _ in 0..opts.max_iter {
            let active: Vec<usize> = (0..part.len()).filter(|&j| part[j].active()).collect();
            if active.is_empty() {
                break;
            }
            iterate(part, &active, a, opts);
        }
    });

    Ok(instances
        .into_iter()
        .map(|inst| {
            let inv = 1.0 / inst.alpha;
            let source = if inst.diverged {
                &inst.last_finite
            } else {
                &inst.state.ghat
            };
            GampOutcome {
                ghat: source.iter().map(|v| v * inv).collect(),
                theta: scale_params(&inst.theta, inv),
                iterations: inst.state.iter,
                converged: inst.converged,
                diverged: inst.diverged,
                residuals: inst.residuals,
                denoiser_fallbacks: inst.fallbacks,
            }
        })
        .collect())
}

fn iterate(instances: &mut [Instance<'_>], active: &[usize], a: &SensingMatrix, opts: &GampOptions) {
    let (m, n) = (a.rows(), a.cols());
    let cols = active.len();
    let mut g = Array2::<f64>::zeros((n, cols).f());
    let mut vg = Array2::<f64>::zeros((n, cols).f());
    for (c, &j) in active.iter().enumerate() {
        let st = &instances[j].state;
        for i in 0..n {
            g[[i, c]] = st.ghat[i];
            vg[[i, c]] = st.nu_g[i];
        }
    }

    // output side: nu_p = |A|^2 nu_g, p = A g - nu_p s
    let mut p = Array2::<f64>::zeros((m, cols).f());
    let mut vp = Array2::<f64>::zeros((m, cols).f());
    general_mat_mul(1.0, a.matrix(), &g, 0.0, &mut p);
    general_mat_mul(1.0, a.squared(), &vg, 0.0, &mut vp);

    let mut s = Array2::<f64>::zeros((m, cols).f());
    let mut vs = Array2::<f64>::zeros((m, cols).f());
    for (c, &j) in active.iter().enumerate() {
        let inst = &mut instances[j];
        let st = &mut inst.state;
        for k in 0..m {
            let nu_p = vp[[k, c]].max(VARIANCE_FLOOR);
            let phat = p[[k, c]] - nu_p * st.shat[k];
            let (x_post, v_post) = inst.channel.posterior(k, phat, nu_p);
            let shat = (x_post - phat) / nu_p;
            let nu_s = ((1.0 - v_post / nu_p) / nu_p).max(VARIANCE_FLOOR);
            st.nu_p[k] = nu_p;
            st.phat[k] = phat;
            st.shat[k] = shat;
            inst.nu_s[k] = nu_s;
            s[[k, c]] = shat;
            vs[[k, c]] = nu_s;
        }
    }

    // input side: nu_r = 1 / (|A|^T nu_s) first, then r = g + nu_r A^T s
    let mut r = Array2::<f64>::zeros((n, cols).f());
    let mut vr = Array2::<f64>::zeros((n, cols).f());
    general_mat_mul(1.0, &a.matrix().t(), &s, 0.0, &mut r);
    general_mat_mul(1.0, &a.squared().t(), &vs, 0.0, &mut vr);

    let l = opts.num_components;
    let mut resp = vec![0.0; l + 1];
    let mut means = vec![0.0; l];
    let mut vars = vec![0.0; l];
    for (c, &j) in active.iter().enumerate() {
        let inst = &mut instances[j];
        let mut stats = EmStats::new(inst.theta.num_components());
        let den = Denoiser::new(&inst.theta);
        let st = &mut inst.state;
        let mut old_energy = 0.0;
        let mut change = 0.0;
        let mut finite = st.shat.iter().all(|v| v.is_finite()) && st.phat.iter().all(|v| v.is_finite());
        let mut new_g = vec![0.0; n];
        let mut new_v = vec![0.0; n];
        let mut fallbacks = 0;
        for i in 0..n {
            let nu_r = (1.0 / vr[[i, c]]).max(VARIANCE_FLOOR);
            let rhat = st.ghat[i] + nu_r * r[[i, c]];
            st.nu_r[i] = nu_r;
            st.rhat[i] = rhat;
            let post = den.entry(rhat, nu_r, &mut resp, &mut means, &mut vars);
            fallbacks += usize::from(post.fallback);
            if opts.em {
                den.accumulate(&resp, &means, &vars, &mut stats);
            }
            old_energy += st.ghat[i] * st.ghat[i];
            change += (st.ghat[i] - post.mean).powi(2);
            finite &= post.mean.is_finite() && post.var.is_finite() && rhat.is_finite();
            new_g[i] = post.mean;
            new_v[i] = post.var;
        }
        if fallbacks > 0 {
            log::warn!("BGM denoiser fell back to the spike on {fallbacks} entries");
        }
        inst.fallbacks += fallbacks;
        st.iter += 1;
        if !finite {
            inst.diverged = true;
            log::warn!("GAMP diverged at iteration {}; keeping last finite iterate", st.iter);
            continue;
        }
        inst.last_finite.copy_from_slice(&st.ghat);
        st.ghat = new_g;
        st.nu_g = new_v;
        if opts.em {
            inst.theta = crate::bgm::em_update_from_stats(&stats, &inst.theta);
        }
        debug_assert!(st.is_finite());
        let rel = if old_energy > 0.0 { change / old_energy } else { f64::INFINITY };
        inst.residuals.push(rel);
        if change < opts.tol * old_energy {
            inst.converged = true;
        }
    }
}
