//! Server-side reconstruction: estimate-and-aggregate (one quantized-channel
//! recovery per device and block) and aggregate-and-estimate (Bussgang-weighted
//! sums per device group, one AWGN recovery per group and block).

use rand::seq::SliceRandom;

use crate::bgm::BgmParams;
use crate::error::{Error, Result};
use crate::gamp::{run_gamp_batch, GampOptions, GampOutcome, GampProblem, OutputChannel};
use crate::quantizer::QuantizerSpec;
use crate::rng;
use crate::sensing::{CompressedBlock, SensingMatrix};
use crate::sparsify::BlockLayout;

/// Disjoint cover of the device indices `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    groups: Vec<Vec<usize>>,
}

impl GroupPlan {
    pub fn new(num_devices: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; num_devices];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::config("G", "empty device group"));
            }
            for &k in g {
                if k >= num_devices {
                    return Err(Error::config("G", format!("device {k} out of range 0..{num_devices}")));
                }
                if std::mem::replace(&mut seen[k], true) {
                    return Err(Error::config("G", format!("device {k} assigned to two groups")));
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::config("G", format!("device {k} is in no group")));
        }
        Ok(GroupPlan { groups })
    }

    /// Seeded random split into `g` groups whose sizes differ by at most one.
    pub fn random(num_devices: usize, g: usize, seed: u64) -> Result<Self> {
        if g == 0 || g > num_devices {
            return Err(Error::config("G", format!("need 1 <= G <= K = {num_devices}, got {g}")));
        }
        let mut order: Vec<usize> = (0..num_devices).collect();
        order.shuffle(&mut rng::stream(seed, "groups", &[num_devices as u64, g as u64]));
        let mut groups = vec![Vec::new(); g];
        for (i, k) in order.into_iter().enumerate() {
            groups[i % g].push(k);
        }
        groups.iter_mut().for_each(|grp| grp.sort_unstable());
        Self::new(num_devices, groups)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

/// `q~ = sum_k rho_k / (gamma alpha_k) q_k`, seen as `A sum_k rho_k g_k`
/// plus white noise of variance `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMeasurement {
    pub q_tilde: Vec<f64>,
    pub nu: f64,
}

/// One device's contribution: dequantized measurements, gain and weight.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub measurements: &'a [f64],
    pub alpha: f64,
    pub rho: f64,
}

/// Bussgang-weighted combination for generic quantizer constants.
/// Returns `None` when nothing contributes.
pub fn bussgang_combine(
    parts: &[Contribution<'_>],
    gamma: f64,
    kappa: f64,
) -> Result<Option<AggregatedMeasurement>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!("Bussgang gain must be positive, got {gamma}")));
    }
    let Some(first) = parts.first() else {
        return Ok(None);
    };
    let m = first.measurements.len();
    let mut q_tilde = vec![0.0; m];
    let mut nu = 0.0;
    for p in parts {
        if p.measurements.len() != m {
            return Err(Error::dim("aggregated measurements", m, p.measurements.len()));
        }
        let w = p.rho / (gamma * p.alpha);
        for (acc, q) in q_tilde.iter_mut().zip(p.measurements) {
            *acc += w * q;
        }
        nu += (p.rho / p.alpha).powi(2);
    }
    Ok(Some(AggregatedMeasurement {
        q_tilde,
        nu: kappa * nu,
    }))
}

/// Combination of one group's payloads for one block. Empty payloads are
/// skipped.
pub fn bussgang_aggregate(
    payloads: &[(&CompressedBlock, f64)],
    spec: &QuantizerSpec,
) -> Result<Option<AggregatedMeasurement>> {
    let dequantized: Vec<(Vec<f64>, f64, f64)> = payloads
        .iter()
        .filter_map(|(p, rho)| p.alpha.map(|alpha| (p.dequantize(spec), alpha, *rho)))
        .collect();
    let parts: Vec<Contribution> = dequantized
        .iter()
        .map(|(q, alpha, rho)| Contribution {
            measurements: q,
            alpha: *alpha,
            rho: *rho,
        })
        .collect();
    bussgang_combine(&parts, spec.gamma(), spec.kappa())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionReport {
    pub estimate: Vec<f64>,
    pub gamp_invocations: usize,
    pub diverged: usize,
    pub iterations: Vec<usize>,
    pub denoiser_fallbacks: usize,
    /// Learned prior per recovery instance, keyed by (device or group, block).
    pub thetas: Vec<((usize, usize), BgmParams)>,
}

impl ReconstructionReport {
    pub fn mean_iterations(&self) -> f64 {
        if self.iterations.is_empty() {
            0.0
        } else {
            self.iterations.iter().sum::<usize>() as f64 / self.iterations.len() as f64
        }
    }

    fn absorb(&mut self, index: &[(usize, usize)], outcomes: &[GampOutcome]) {
        self.gamp_invocations += outcomes.len();
        for (&key, o) in index.iter().zip(outcomes) {
            self.thetas.push((key, o.theta.clone()));
            self.diverged += usize::from(o.diverged);
            self.iterations.push(o.iterations);
            self.denoiser_fallbacks += o.denoiser_fallbacks;
        }
    }
}

/// Shared inputs of both strategies.
#[derive(Debug, Clone, Copy)]
pub struct ServerContext<'a> {
    pub layout: &'a BlockLayout,
    pub matrix: &'a SensingMatrix,
    pub spec: &'a QuantizerSpec,
    pub opts: &'a GampOptions,
    /// Master seed and round index for the GAMP starting points.
    pub seed: u64,
    pub round: u64,
}

fn check_payloads(payloads: &[Vec<CompressedBlock>], rho: &[f64], ctx: &ServerContext<'_>) -> Result<()> {
    if payloads.len() != rho.len() {
        return Err(Error::dim("device weights", payloads.len(), rho.len()));
    }
    let blocks = ctx.layout.num_blocks();
    for p in payloads {
        if p.len() != blocks {
            return Err(Error::dim("blocks per device", blocks, p.len()));
        }
    }
    if ctx.matrix.cols() != ctx.layout.block_len() {
        return Err(Error::dim("sensing matrix columns", ctx.layout.block_len(), ctx.matrix.cols()));
    }
    Ok(())
}

/// `g_K = sum_k rho_k Concatenate(g_k)` with one Q-EM-GAMP per device block.
pub fn estimate_and_aggregate(
    payloads: &[Vec<CompressedBlock>],
    rho: &[f64],
    ctx: &ServerContext<'_>,
) -> Result<ReconstructionReport> {
    check_payloads(payloads, rho, ctx)?;
    let mut index = Vec::new();
    let mut problems = Vec::new();
    for (k, blocks) in payloads.iter().enumerate() {
        for (b, p) in blocks.iter().enumerate() {
            if let Some(alpha) = p.alpha {
                index.push((k, b));
                problems.push(GampProblem {
                    channel: OutputChannel::Quantized {
                        indices: &p.indices,
                        spec: ctx.spec,
                    },
                    alpha,
                    theta0: None,
                    seed: rng::derive_seed(ctx.seed, "gamp-init", &[ctx.round, k as u64, b as u64]),
                });
            }
        }
    }
    let outcomes = run_gamp_batch(&problems, ctx.matrix, ctx.opts)?;
    let mut report = ReconstructionReport {
        estimate: vec![0.0; ctx.layout.total_dim()],
        ..Default::default()
    };
    report.absorb(&index, &outcomes);
    for (&(k, b), o) in index.iter().zip(&outcomes) {
        ctx.layout.scatter_add(&o.ghat, b, rho[k], &mut report.estimate);
    }
    Ok(report)
}

/// `g_K = sum_g Concatenate(g_{K_g})` with one AWGN EM-GAMP per group block.
pub fn aggregate_and_estimate(
    payloads: &[Vec<CompressedBlock>],
    rho: &[f64],
    plan: &GroupPlan,
    ctx: &ServerContext<'_>,
) -> Result<ReconstructionReport> {
    check_payloads(payloads, rho, ctx)?;
    if plan.groups.iter().flatten().any(|&k| k >= payloads.len()) {
        return Err(Error::config("G", "group plan does not match the device count"));
    }
    let m = ctx.matrix.rows() as f64;
    let mut index = Vec::new();
    let mut measurements = Vec::new();
    for (g, members) in plan.groups.iter().enumerate() {
        for b in 0..ctx.layout.num_blocks() {
            let group_payloads: Vec<(&CompressedBlock, f64)> =
                members.iter().map(|&k| (&payloads[k][b], rho[k])).collect();
            if let Some(agg) = bussgang_aggregate(&group_payloads, ctx.spec)? {
                // gain that brings the noiseless part to unit power per entry
                let energy: f64 = agg.q_tilde.iter().map(|v| v * v).sum();
                if energy == 0.0 {
                    continue;
                }
                let signal = (energy - m * agg.nu).max(1e-2 * energy);
                let c = (m / signal).sqrt();
                let y: Vec<f64> = agg.q_tilde.iter().map(|v| c * v).collect();
                index.push((g, b));
                measurements.push((y, c * c * agg.nu, c));
            }
        }
    }
    let problems: Vec<GampProblem> = index
        .iter()
        .zip(&measurements)
        .map(|(&(g, b), (y, nu_d, c))| GampProblem {
            channel: OutputChannel::Awgn {
                y,
                nu_d: nu_d.max(crate::gamp::VARIANCE_FLOOR),
            },
            alpha: *c,
            theta0: None,
            seed: rng::derive_seed(ctx.seed, "gamp-init", &[ctx.round, g as u64, b as u64]),
        })
        .collect();
    let outcomes = run_gamp_batch(&problems, ctx.matrix, ctx.opts)?;
    let mut report = ReconstructionReport {
        estimate: vec![0.0; ctx.layout.total_dim()],
        ..Default::default()
    };
    report.absorb(&index, &outcomes);
    for (&(_, b), o) in index.iter().zip(&outcomes) {
        ctx.layout.scatter_add(&o.ghat, b, 1.0, &mut report.estimate);
    }
    Ok(report)
}

/// `rho_k = |D_k| / sum_j |D_j|`.
pub fn device_weights(batch_sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = batch_sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("all device batches are empty".into()));
    }
    Ok(batch_sizes.iter().map(|&s| s as f64 / total as f64).collect())
}
