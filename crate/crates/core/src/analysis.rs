//! Closed-form evaluators: the asymptotic MSE bound of aggregate-and-estimate
//! recovery, the LMMSE value it is built from, the fixed SGD learning rate of
//! the convergence result with its right-hand side, and the empirical
//! reconstruction-error ratio.

use serde::Serialize;

use crate::bgm::BgmParams;
use crate::error::{Error, Result};

/// Per-block statistics of the aggregated gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundInputs {
    /// `sum_k rho_k^2 nu_{g_{k,b}}` per block.
    pub nu_tilde: Vec<f64>,
    /// `sum_k (rho_k mu_{g_{k,b}})^2` per block.
    pub mu_sq_tilde: Vec<f64>,
    pub ratio: f64,
    pub kappa: f64,
    pub block_len: usize,
}

impl BoundInputs {
    /// Every device block drawn IID from `theta`.
    pub fn iid(theta: &BgmParams, rho: &[f64], blocks: usize, ratio: f64, kappa: f64, block_len: usize) -> Self {
        let (mean, var) = (theta.mean(), theta.variance());
        let nu = rho.iter().map(|r| r * r * var).sum::<f64>();
        let mu = rho.iter().map(|r| (r * mean).powi(2)).sum::<f64>();
        BoundInputs {
            nu_tilde: vec![nu; blocks],
            mu_sq_tilde: vec![mu; blocks],
            ratio,
            kappa,
            block_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu_tilde.len() != self.mu_sq_tilde.len() {
            return Err(Error::dim("bound blocks", self.nu_tilde.len(), self.mu_sq_tilde.len()));
        }
        if self.nu_tilde.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput("aggregated variances must be positive".into()));
        }
        if !(self.ratio >= 1.0) {
            return Err(Error::InvalidInput(format!("R must be >= 1, got {}", self.ratio)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidInput(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// Effective distortion `xi = kappa (nu~ + mu~_sq)`.
pub fn distortion(kappa: f64, nu_tilde: f64, mu_sq_tilde: f64) -> f64 {
    kappa * (nu_tilde + mu_sq_tilde)
}

/// Asymptotic LMMSE of one block: `nu~ N (1 - nu~ / (R nu~ + xi))`.
pub fn lmmse_mse(nu_tilde: f64, xi: f64, ratio: f64, block_len: usize) -> f64 {
    nu_tilde * block_len as f64 * (1.0 - nu_tilde / (ratio * nu_tilde + xi))
}

/// `N sum_b nu~_b (1 - nu~_b / (R nu~_b + kappa (nu~_b + mu~_sq_b)))`.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(inputs
        .nu_tilde
        .iter()
        .zip(&inputs.mu_sq_tilde)
        .map(|(&nu, &mu)| lmmse_mse(nu, distortion(inputs.kappa, nu, mu), inputs.ratio, inputs.block_len))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceParams {
    pub beta: f64,
    pub sigma2: f64,
    pub epsilon: f64,
    pub rounds: usize,
    /// `F(w_1) - F(w*)`.
    pub loss_gap: f64,
}

/// Fixed rate `(1 - sqrt(eps)) / (2 beta (1 + eps) sqrt(T))` and the bound
/// `(1/sqrt(T)) [4 beta (1 + eps) / (1 - sqrt(eps))^2 (F_1 - F*) + sigma^2 / (1 + eps)]`
/// on the average squared gradient norm.
pub fn theorem2_rate(p: &ConvergenceParams) -> Result<(f64, f64)> {
    if !(p.epsilon >= 0.0 && p.epsilon < 1.0) {
        return Err(Error::config("epsilon", format!("must lie in [0, 1), got {}", p.epsilon)));
    }
    if !(p.beta > 0.0) {
        return Err(Error::config("beta", "must be positive"));
    }
    if !(p.sigma2 >= 0.0) {
        return Err(Error::config("sigma2", "must be non-negative"));
    }
    if p.rounds == 0 {
        return Err(Error::config("T", "must be positive"));
    }
    let root_t = (p.rounds as f64).sqrt();
    let root_eps = p.epsilon.sqrt();
    let eta = (1.0 - root_eps) / (2.0 * p.beta * (1.0 + p.epsilon) * root_t);
    let rhs = (4.0 * p.beta * (1.0 + p.epsilon) / (1.0 - root_eps).powi(2) * p.loss_gap
        + p.sigma2 / (1.0 + p.epsilon))
        / root_t;
    Ok((eta, rhs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonReport {
    pub series: Vec<f64>,
    pub max: f64,
}

/// `eps_t = ||g^ - g||^2 / ||grad F(w_t)||^2` from per-round squared norms.
pub fn measure_epsilon(error_sq: &[f64], full_grad_sq: &[f64]) -> Result<EpsilonReport> {
    if error_sq.len() != full_grad_sq.len() {
        return Err(Error::dim("epsilon series", error_sq.len(), full_grad_sq.len()));
    }
    let series: Vec<f64> = error_sq
        .iter()
        .zip(full_grad_sq)
        .map(|(&e, &g)| if g > 0.0 { e / g } else if e == 0.0 { 0.0 } else { f64::INFINITY })
        .collect();
    let max = series.iter().copied().fold(0.0, f64::max);
    Ok(EpsilonReport { series, max })
}
