//! Round orchestration: device gradients, compression, server recovery,
//! model update, metrics and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{theorem1_bound, BoundInputs};
use crate::baselines::{majority_vote, qiht_batch, qiht_step_size, sign_vector, DitherCodec, QihtProblem};
use crate::bgm::BgmParams;
use crate::config::{DataConfig, ExperimentConfig, Framework};
use crate::data::{data_root, load_mnist, partition_noniid, synthetic_gradients, Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::{evaluate, forward_backward, Mlp, Optimizer, OptimizerConfig};
use crate::quantizer::QuantizerSpec;
use crate::reconstruct::{
    aggregate_and_estimate, device_weights, estimate_and_aggregate, GroupPlan, ReconstructionReport, ServerContext,
};
use crate::rng;
use crate::sensing::{compress_block, measurement_count, CompressedBlock, SensingMatrix, ALPHA_BITS};
use crate::sparsify::{accumulate_residual, block_sparsify, sparsity_level, BlockLayout, ResidualState, SparseBlock};

/// Bits per uncompressed gradient entry.
pub const FLOAT_BITS: u64 = 32;

/// One row of `metrics.csv`. Empty cells mean "not measured this round".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: usize,
    /// Against the weighted sum of the transmitted sparse blocks.
    pub nmse_primary: Option<f64>,
    /// Against the weighted sum of the raw device gradients.
    pub nmse_full: Option<f64>,
    /// Absolute squared error against the primary target.
    pub mse: Option<f64>,
    pub mse_bound: Option<f64>,
    pub epsilon: Option<f64>,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub bits: u64,
    pub gamp_invocations: usize,
    pub gamp_mean_iters: f64,
    pub diverged: usize,
    pub refused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub t: usize,
    pub device_seconds: f64,
    pub server_seconds: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub framework: Framework,
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub mean_nmse_last10: Option<f64>,
    pub total_bits: u64,
    pub bits_per_device_round: u64,
    /// Payload bits per gradient entry, gains excluded: `Q M / N` for the
    /// compressed frameworks.
    pub bits_per_entry: f64,
    pub nominal_bits_per_entry: f64,
    pub measurements: Option<usize>,
    pub sparsity: Option<usize>,
    pub gamp_invocations: usize,
    pub gamp_diverged: usize,
    pub refused_updates: usize,
    pub epsilon_max: Option<f64>,
    pub mse_bound: Option<f64>,
}

enum Source {
    Mnist {
        train: Dataset,
        test: Dataset,
        partition: Partition,
        batch_size: usize,
        model: Mlp,
        optimizer: Optimizer,
    },
    Synthetic {
        theta: BgmParams,
    },
}

enum Codec {
    None,
    Qcs {
        matrix: SensingMatrix,
        spec: &'static QuantizerSpec,
        plan: Option<GroupPlan>,
        qiht_mu: f64,
    },
    Dither {
        codecs: Vec<DitherCodec>,
    },
}

/// A run in progress: everything needed to execute the next round.
pub struct Experiment {
    cfg: ExperimentConfig,
    layout: BlockLayout,
    sparsity: usize,
    rows_m: usize,
    codec: Codec,
    source: Source,
    residuals: Vec<ResidualState>,
    rows: Vec<RoundMetrics>,
    timings: Vec<RoundTiming>,
    thetas: Vec<((usize, usize), BgmParams)>,
    bound: Option<f64>,
}

/// Per-round products kept outside the metrics row.
struct RoundOutput {
    metrics: RoundMetrics,
    timing: RoundTiming,
    thetas: Vec<((usize, usize), BgmParams)>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn nmse(target: &[f64], estimate: &[f64]) -> Option<f64> {
    let denom = sq_norm(target);
    (denom > 0.0).then(|| sq_dist(target, estimate) / denom)
}

impl Experiment {
    /// Loads data, partitions it, and builds the shared matrices.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.devices;
        let dim = cfg.dimension();
        let layout = BlockLayout::contiguous(dim, cfg.blocks)?;
        let n = layout.block_len();
        let sparsity = sparsity_level(cfg.s_ratio, n);
        let rows_m = measurement_count(n, cfg.ratio)?;
        let codec = match cfg.framework {
            Framework::Signsgd | Framework::Perfect => Codec::None,
            Framework::QcsDither => Codec::Dither {
                codecs: (0..cfg.blocks)
                    .map(|b| DitherCodec::new(n, rows_m, cfg.bits, cfg.seed, b as u64))
                    .collect::<Result<_>>()?,
            },
            f => {
                let matrix = SensingMatrix::new(rows_m, n, cfg.seed)?;
                let plan = (f == Framework::FedqcsAe)
                    .then(|| GroupPlan::random(k, cfg.groups, cfg.seed))
                    .transpose()?;
                let qiht_mu = if f == Framework::QcsQiht { qiht_step_size(&matrix) } else { 0.0 };
                Codec::Qcs {
                    matrix,
                    spec: QuantizerSpec::lloyd_max(cfg.bits)?,
                    plan,
                    qiht_mu,
                }
            }
        };
        let source = match &cfg.data {
            DataConfig::Mnist {
                root,
                samples_per_device,
                test_samples,
                batch_size,
            } => {
                let root = root.clone().unwrap_or_else(data_root);
                let (train, test) = load_mnist(&root)?;
                let partition = partition_noniid(&train.labels, k, *samples_per_device, cfg.seed)?;
                let test = test.subsample(*test_samples, cfg.seed);
                let opt_cfg: OptimizerConfig = cfg.optimizer.resolve(cfg.rounds)?;
                Source::Mnist {
                    train,
                    test,
                    partition,
                    batch_size: *batch_size,
                    model: Mlp::glorot(cfg.seed),
                    optimizer: Optimizer::new(&opt_cfg, dim),
                }
            }
            DataConfig::Synthetic { theta, .. } => Source::Synthetic { theta: theta.clone() },
        };
        let bound = match (&source, &codec) {
            (Source::Synthetic { theta }, Codec::Qcs { spec, .. }) => {
                let rho = vec![1.0 / k as f64; k];
                let ratio = n as f64 / rows_m as f64;
                Some(theorem1_bound(&BoundInputs::iid(theta, &rho, cfg.blocks, ratio, spec.kappa(), n))?)
            }
            _ => None,
        };
        Ok(Experiment {
            residuals: vec![ResidualState::new(dim); k],
            cfg,
            layout,
            sparsity,
            rows_m,
            codec,
            source,
            rows: Vec::new(),
            timings: Vec::new(),
            thetas: Vec::new(),
            bound,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.rows.len()
    }

    pub fn is_finished(&self) -> bool {
        self.round() >= self.cfg.rounds
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.rows
    }

    pub fn timings(&self) -> &[RoundTiming] {
        &self.timings
    }

    pub fn measurements(&self) -> usize {
        self.rows_m
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    pub fn residuals(&self) -> &[ResidualState] {
        &self.residuals
    }

    /// Current model parameters; `None` in synthetic mode.
    pub fn params(&self) -> Option<&[f64]> {
        match &self.source {
            Source::Mnist { model, .. } => Some(model.params()),
            Source::Synthetic { .. } => None,
        }
    }

    /// Priors learned in the most recent round that ran GAMP.
    pub fn learned_priors(&self) -> &[((usize, usize), BgmParams)] {
        &self.thetas
    }

    /// Closed-form MSE bound per round for synthetic aggregate data.
    pub fn mse_bound(&self) -> Option<f64> {
        self.bound
    }

    /// Bits sent by one device in one round.
    pub fn bits_per_device_round(&self) -> u64 {
        let dim = self.cfg.dimension() as u64;
        match self.cfg.framework {
            Framework::Perfect => FLOAT_BITS * dim,
            Framework::Signsgd => dim,
            _ => self.cfg.blocks as u64 * (u64::from(self.cfg.bits) * self.rows_m as u64 + ALPHA_BITS),
        }
    }

    /// Payload bits per gradient entry without the gains.
    pub fn bits_per_entry(&self) -> f64 {
        match self.cfg.framework {
            Framework::Perfect => FLOAT_BITS as f64,
            Framework::Signsgd => 1.0,
            _ => f64::from(self.cfg.bits) * self.rows_m as f64 / self.layout.block_len() as f64,
        }
    }

    pub fn nominal_bits_per_entry(&self) -> f64 {
        match self.cfg.framework {
            Framework::Perfect => FLOAT_BITS as f64,
            Framework::Signsgd => 1.0,
            _ => f64::from(self.cfg.bits) / self.cfg.ratio,
        }
    }

    /// Local gradients of round `t` and their mean losses.
    fn device_gradients(&self, t: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<usize>)> {
        let k = self.cfg.devices;
        match &self.source {
            Source::Mnist {
                train,
                partition,
                batch_size,
                model,
                ..
            } => {
                let out: Vec<Result<(f64, Vec<f64>)>> = (0..k)
                    .into_par_iter()
                    .map(|d| {
                        let local = &partition.devices[d];
                        let mut r = rng::stream(self.cfg.seed, "device-batch", &[d as u64, t as u64]);
                        let batch: Vec<usize> = sample(&mut r, local.len(), *batch_size)
                            .into_iter()
                            .map(|i| local[i])
                            .collect();
                        forward_backward(model, train, &batch)
                    })
                    .collect();
                let mut grads = Vec::with_capacity(k);
                let mut losses = Vec::with_capacity(k);
                for o in out {
                    let (l, g) = o?;
                    losses.push(l);
                    grads.push(g);
                }
                Ok((grads, losses, vec![*batch_size; k]))
            }
            Source::Synthetic { theta } => {
                let seed = rng::derive_seed(self.cfg.seed, "synthetic-round", &[t as u64]);
                let grads = synthetic_gradients(theta, k, self.cfg.blocks, self.layout.block_len(), seed)?;
                Ok((grads, Vec::new(), vec![1; k]))
            }
        }
    }

    /// `grad F(w_t)` over all local data, weighted by local dataset size.
    fn full_gradient(&self) -> Result<Vec<f64>> {
        let Source::Mnist {
            train, partition, model, ..
        } = &self.source
        else {
            return Err(Error::Unsupported("full gradient needs a model".into()));
        };
        let sizes: Vec<usize> = partition.devices.iter().map(Vec::len).collect();
        let rho = device_weights(&sizes)?;
        let mut full = vec![0.0; self.cfg.dimension()];
        for (local, r) in partition.devices.iter().zip(&rho) {
            let (_, g) = forward_backward(model, train, local)?;
            for (f, v) in full.iter_mut().zip(&g) {
                *f += r * v;
            }
        }
        Ok(full)
    }

    /// Server-side estimate of `sum_k rho_k g_k` from the sparse device blocks.
    fn reconstruct(
        &self,
        t: usize,
        sparse: &[Vec<SparseBlock>],
        rho: &[f64],
    ) -> Result<(Vec<f64>, Option<ReconstructionReport>)> {
        let dim = self.cfg.dimension();
        match &self.codec {
            Codec::None => Err(Error::Unsupported("no codec for this framework".into())),
            Codec::Qcs {
                matrix,
                spec,
                plan,
                qiht_mu,
            } => {
                let payloads: Vec<Vec<CompressedBlock>> = sparse
                    .par_iter()
                    .map(|blocks| blocks.iter().map(|b| compress_block(b, matrix, spec)).collect())
                    .collect::<Result<_>>()?;
                let ctx = ServerContext {
                    layout: &self.layout,
                    matrix,
                    spec,
                    opts: &self.cfg.gamp,
                    seed: self.cfg.seed,
                    round: t as u64,
                };
                match self.cfg.framework {
                    Framework::FedqcsEa => {
                        let r = estimate_and_aggregate(&payloads, rho, &ctx)?;
                        Ok((r.estimate.clone(), Some(r)))
                    }
                    Framework::FedqcsAe => {
                        let plan = plan.as_ref().expect("group plan for aggregate-and-estimate");
                        let r = aggregate_and_estimate(&payloads, rho, plan, &ctx)?;
                        Ok((r.estimate.clone(), Some(r)))
                    }
                    _ => {
                        let mut index = Vec::new();
                        let mut deq = Vec::new();
                        for (k, blocks) in payloads.iter().enumerate() {
                            for (b, p) in blocks.iter().enumerate() {
                                if let Some(alpha) = p.alpha {
                                    index.push((k, b, alpha));
                                    deq.push(p.dequantize(spec));
                                }
                            }
                        }
                        let problems: Vec<QihtProblem> = index
                            .iter()
                            .zip(&deq)
                            .map(|(&(_, _, alpha), q)| QihtProblem { q, alpha })
                            .collect();
                        let est = qiht_batch(&problems, matrix, spec, self.sparsity, self.cfg.qiht_iters, *qiht_mu)?;
                        let mut out = vec![0.0; dim];
                        for (&(k, b, _), g) in index.iter().zip(&est) {
                            self.layout.scatter_add(g, b, rho[k], &mut out);
                        }
                        Ok((out, None))
                    }
                }
            }
            Codec::Dither { codecs } => {
                let decoded: Vec<Vec<Option<Vec<f64>>>> = sparse
                    .par_iter()
                    .enumerate()
                    .map(|(k, blocks)| {
                        blocks
                            .iter()
                            .enumerate()
                            .map(|(b, blk)| {
                                let codec = &codecs[b];
                                let u = codec.dither(self.cfg.seed, k as u64, t as u64, b as u64);
                                let payload = codec.compress(&blk.values, &u);
                                codec.decode(&payload, &u).map(|y| codec.back_project(&y))
                            })
                            .collect()
                    })
                    .collect();
                let mut out = vec![0.0; dim];
                for (k, blocks) in decoded.iter().enumerate() {
                    for (b, g) in blocks.iter().enumerate() {
                        if let Some(g) = g {
                            self.layout.scatter_add(g, b, rho[k], &mut out);
                        }
                    }
                }
                Ok((out, None))
            }
        }
    }

    fn run_round_inner(&mut self) -> Result<RoundOutput> {
        let t = self.round();
        let start = Instant::now();
        let k = self.cfg.devices;
        let dim = self.cfg.dimension();
        let (grads, losses, sizes) = self.device_gradients(t)?;
        let rho = device_weights(&sizes)?;
        let mut g_eq5 = vec![0.0; dim];
        for (g, r) in grads.iter().zip(&rho) {
            for (a, v) in g_eq5.iter_mut().zip(g) {
                *a += r * v;
            }
        }
        let bits = k as u64 * self.bits_per_device_round();
        let mut metrics = RoundMetrics {
            t,
            nmse_primary: None,
            nmse_full: None,
            mse: None,
            mse_bound: self.bound,
            epsilon: None,
            accuracy: None,
            loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            bits,
            gamp_invocations: 0,
            gamp_mean_iters: 0.0,
            diverged: 0,
            refused: false,
        };
        let mut thetas = Vec::new();
        let device_done = Instant::now();

        let update: Vec<f64> = match self.cfg.framework {
            Framework::Perfect => {
                metrics.nmse_primary = Some(0.0);
                metrics.nmse_full = Some(0.0);
                metrics.mse = Some(0.0);
                g_eq5.clone()
            }
            Framework::Signsgd => {
                let signs: Vec<Vec<i8>> = grads.iter().map(|g| sign_vector(g)).collect();
                majority_vote(&signs)?
            }
            _ => {
                let s = self.sparsity;
                let layout = &self.layout;
                let sparse: Vec<Vec<SparseBlock>> = grads
                    .par_iter()
                    .zip(self.residuals.par_iter_mut())
                    .map(|(g, res)| {
                        let augmented = res.augment(g)?;
                        let blocks = block_sparsify(&augmented, layout, s)?;
                        accumulate_residual(&augmented, &blocks, layout, res)?;
                        Ok(blocks)
                    })
                    .collect::<Result<_>>()?;
                let mut target = vec![0.0; dim];
                for (blocks, r) in sparse.iter().zip(&rho) {
                    for (b, blk) in blocks.iter().enumerate() {
                        layout.scatter_add(&blk.values, b, *r, &mut target);
                    }
                }
                let (estimate, report) = self.reconstruct(t, &sparse, &rho)?;
                metrics.nmse_primary = nmse(&target, &estimate);
                metrics.nmse_full = nmse(&g_eq5, &estimate);
                metrics.mse = Some(sq_dist(&target, &estimate));
                if let Some(r) = report {
                    metrics.gamp_invocations = r.gamp_invocations;
                    metrics.gamp_mean_iters = r.mean_iterations();
                    metrics.diverged = r.diverged;
                    thetas = r.thetas;
                }
                estimate
            }
        };

        if self.cfg.measure_epsilon {
            let full = self.full_gradient()?;
            let denom = sq_norm(&full);
            metrics.epsilon = Some(if denom > 0.0 { sq_dist(&update, &full) / denom } else { 0.0 });
        }

        let last = t + 1 == self.cfg.rounds;
        let eval = (t + 1) % self.cfg.eval_every == 0 || last;
        let framework = self.cfg.framework;
        let sign_lr = self.cfg.sign_lr;
        if let Source::Mnist {
            test, model, optimizer, ..
        } = &mut self.source
        {
            if framework == Framework::Signsgd {
                for (w, v) in model.params_mut().iter_mut().zip(&update) {
                    *w -= sign_lr * v;
                }
            } else {
                metrics.refused = !optimizer.apply(model.params_mut(), &update)?;
            }
            if model.params().iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged {
                    round: t as u64,
                    reason: "model parameters became non-finite".into(),
                });
            }
            if eval {
                metrics.accuracy = Some(evaluate(model, test)?);
            }
        }
        if metrics.loss.is_some_and(|l| !l.is_finite()) {
            return Err(Error::Diverged {
                round: t as u64,
                reason: "training loss is non-finite".into(),
            });
        }
        let end = Instant::now();
        Ok(RoundOutput {
            metrics,
            timing: RoundTiming {
                t,
                device_seconds: (device_done - start).as_secs_f64(),
                server_seconds: (end - device_done).as_secs_f64(),
                seconds: (end - start).as_secs_f64(),
            },
            thetas,
        })
    }

    /// Executes the next round and records its metrics.
    pub fn run_round(&mut self) -> Result<&RoundMetrics> {
        if self.is_finished() {
            return Err(Error::InvalidInput(format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let out = self.run_round_inner()?;
        log::debug!(
            "round {} nmse {:?} acc {:?} ({:.2}s)",
            out.metrics.t,
            out.metrics.nmse_primary,
            out.metrics.accuracy,
            out.timing.seconds
        );
        if !out.thetas.is_empty() {
            self.thetas = out.thetas;
        }
        self.timings.push(out.timing);
        self.rows.push(out.metrics);
        Ok(self.rows.last().expect("row just pushed"))
    }

    pub fn summary(&self) -> Summary {
        let rows = &self.rows;
        let tail = rows.len().div_ceil(10);
        let tail_nmse: Vec<f64> = rows[rows.len() - tail..].iter().filter_map(|r| r.nmse_primary).collect();
        let eps: Vec<f64> = rows.iter().filter_map(|r| r.epsilon).collect();
        let compressed = self.cfg.framework.uses_block_compression();
        Summary {
            framework: self.cfg.framework,
            rounds: rows.len(),
            final_accuracy: rows.iter().rev().find_map(|r| r.accuracy),
            mean_nmse_last10: (!tail_nmse.is_empty()).then(|| tail_nmse.iter().sum::<f64>() / tail_nmse.len() as f64),
            total_bits: rows.iter().map(|r| r.bits).sum(),
            bits_per_device_round: self.bits_per_device_round(),
            bits_per_entry: self.bits_per_entry(),
            nominal_bits_per_entry: self.nominal_bits_per_entry(),
            measurements: compressed.then_some(self.rows_m),
            sparsity: compressed.then_some(self.sparsity),
            gamp_invocations: rows.iter().map(|r| r.gamp_invocations).sum(),
            gamp_diverged: rows.iter().map(|r| r.diverged).sum(),
            refused_updates: rows.iter().filter(|r| r.refused).count(),
            epsilon_max: (!eps.is_empty()).then(|| eps.iter().copied().fold(0.0, f64::max)),
            mse_bound: self.bound,
        }
    }

    /// Mean primary NMSE over the last `fraction` of the rounds run.
    pub fn tail_nmse(&self, fraction: f64) -> Option<f64> {
        let n = ((self.rows.len() as f64 * fraction).ceil() as usize).min(self.rows.len());
        let v: Vec<f64> = self.rows[self.rows.len() - n..].iter().filter_map(|r| r.nmse_primary).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"FQCSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| self.fail("bad length"))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("bad length"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Experiment {
    /// Binary little-endian snapshot of the run state after the last round.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(self.cfg.to_toml()?.as_bytes());
        w.u64(self.round() as u64);
        match &self.source {
            Source::Mnist { model, optimizer, .. } => {
                w.u8(1);
                w.f64s(model.params());
                match optimizer {
                    Optimizer::Sgd { .. } => w.u8(0),
                    Optimizer::Adam { m, v, step, .. } => {
                        w.u8(1);
                        w.u64(*step);
                        w.f64s(m);
                        w.f64s(v);
                    }
                }
            }
            Source::Synthetic { .. } => w.u8(0),
        }
        w.u64(self.residuals.len() as u64);
        for r in &self.residuals {
            w.f64s(&r.delta);
        }
        w.bytes(&serde_json::to_vec(&self.rows)?);
        w.bytes(&serde_json::to_vec(&self.timings)?);
        Ok(w.0)
    }

    /// Rebuilds a run from `cfg` and restores the state saved in `bytes`.
    /// The configuration must equal the one the checkpoint was written with.
    pub fn restore(cfg: ExperimentConfig, bytes: &[u8], path: &Path) -> Result<Self> {
        let mut exp = Experiment::new(cfg)?;
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return Err(r.fail("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let saved = r.bytes()?;
        if saved != exp.cfg.to_toml()?.as_bytes() {
            return Err(Error::config("checkpoint", "configuration differs from the checkpointed run"));
        }
        let t = r.u64()? as usize;
        let has_model = r.u8()?;
        match (&mut exp.source, has_model) {
            (Source::Mnist { model, optimizer, .. }, 1) => {
                let params = r.f64s()?;
                *model = Mlp::from_params(params)?;
                let kind = r.u8()?;
                match (optimizer, kind) {
                    (Optimizer::Sgd { .. }, 0) => {}
                    (Optimizer::Adam { m, v, step, .. }, 1) => {
                        *step = r.u64()?;
                        let (mm, vv) = (r.f64s()?, r.f64s()?);
                        if mm.len() != m.len() || vv.len() != v.len() {
                            return Err(r.fail("optimizer state length"));
                        }
                        *m = mm;
                        *v = vv;
                    }
                    _ => return Err(r.fail("optimizer kind mismatch")),
                }
            }
            (Source::Synthetic { .. }, 0) => {}
            _ => return Err(r.fail("data mode mismatch")),
        }
        let k = r.u64()? as usize;
        if k != exp.residuals.len() {
            return Err(r.fail("device count mismatch"));
        }
        for res in &mut exp.residuals {
            let d = r.f64s()?;
            if d.len() != res.delta.len() {
                return Err(r.fail("residual length"));
            }
            res.delta = d;
        }
        exp.rows = serde_json::from_slice(r.bytes()?)?;
        exp.timings = serde_json::from_slice(r.bytes()?)?;
        if exp.rows.len() != t {
            return Err(r.fail("metric rows do not match the round counter"));
        }
        Ok(exp)
    }
}

// ---------------------------------------------------------------------------
// output files

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 13] = [
    "t",
    "nmse_primary",
    "nmse_full",
    "mse",
    "mse_bound",
    "epsilon",
    "accuracy",
    "loss",
    "bits",
    "gamp_invocations",
    "gamp_mean_iters",
    "diverged",
    "refused",
];

/// Writes `metrics.csv`. Values are printed in shortest round-trip form, so
/// equal runs give equal bytes.
pub fn write_metrics(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            fmt_opt(r.nmse_primary),
            fmt_opt(r.nmse_full),
            fmt_opt(r.mse),
            fmt_opt(r.mse_bound),
            fmt_opt(r.epsilon),
            fmt_opt(r.accuracy),
            fmt_opt(r.loss),
            r.bits.to_string(),
            r.gamp_invocations.to_string(),
            format!("{:e}", r.gamp_mean_iters),
            r.diverged.to_string(),
            u8::from(r.refused).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings(path: &Path, rows: &[RoundTiming]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PriorDump<'a> {
    unit: usize,
    block: usize,
    #[serde(flatten)]
    theta: &'a BgmParams,
}

/// Output directory layout of a run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunFiles { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn quantizer(&self) -> PathBuf {
        self.dir.join("quantizer.json")
    }
    pub fn priors(&self) -> PathBuf {
        self.dir.join("theta.json")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

impl Experiment {
    fn flush(&self, files: &RunFiles) -> Result<()> {
        write_metrics(&files.metrics(), &self.rows)?;
        write_timings(&files.timing(), &self.timings)?;
        Ok(())
    }

    fn save_checkpoint(&self, files: &RunFiles) -> Result<()> {
        let tmp = files.dir.join("checkpoint.bin.tmp");
        fs::write(&tmp, self.checkpoint_bytes()?)?;
        fs::rename(tmp, files.checkpoint())?;
        Ok(())
    }

    fn write_final(&self, files: &RunFiles) -> Result<()> {
        self.flush(files)?;
        write_json(&files.summary(), &self.summary())?;
        if self.cfg.framework.uses_block_compression() {
            let spec = QuantizerSpec::lloyd_max(self.cfg.bits)?;
            fs::write(files.quantizer(), spec.to_json()? + "\n")?;
        }
        let priors: Vec<PriorDump> = self
            .thetas
            .iter()
            .map(|((unit, block), theta)| PriorDump {
                unit: *unit,
                block: *block,
                theta,
            })
            .collect();
        write_json(&files.priors(), &priors)?;
        Ok(())
    }

    /// Runs the remaining rounds. With `files`, metrics are flushed and a
    /// checkpoint written every `checkpoint_every` rounds, and the summary
    /// and dumps at the end.
    pub fn run_to_end(&mut self, files: Option<&RunFiles>) -> Result<()> {
        if let Some(f) = files {
            fs::create_dir_all(&f.dir)?;
            fs::write(f.config(), self.cfg.to_toml()?)?;
        }
        while !self.is_finished() {
            self.run_round()?;
            let t = self.round();
            if let Some(f) = files {
                let every = self.cfg.checkpoint_every;
                if every > 0 && t % every == 0 && !self.is_finished() {
                    self.flush(f)?;
                    self.save_checkpoint(f)?;
                }
            }
        }
        if let Some(f) = files {
            self.write_final(f)?;
            self.save_checkpoint(f)?;
        }
        Ok(())
    }
}

/// Runs `cfg` from scratch, or from `out/checkpoint.bin` when `resume` is set
/// and a checkpoint exists.
pub fn run_experiment(cfg: ExperimentConfig, out: Option<&Path>, resume: bool) -> Result<Experiment> {
    let files = out.map(RunFiles::new);
    let mut exp = match &files {
        Some(f) if resume && f.checkpoint().exists() => {
            let path = f.checkpoint();
            let bytes = fs::read(&path)?;
            let exp = Experiment::restore(cfg, &bytes, &path)?;
            log::info!("resuming at round {}", exp.round());
            exp
        }
        _ => Experiment::new(cfg)?,
    };
    exp.run_to_end(files.as_ref())?;
    Ok(exp)
}
