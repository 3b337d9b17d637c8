//! Comparison schemes: quantized iterative hard thresholding on the FedQCS
//! payloads, dithered uniform quantization after a subsampled randomized
//! Hadamard transform, and sign compression with majority vote.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ShapeBuilder};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantizer::QuantizerSpec;
use crate::rng;
use crate::sensing::SensingMatrix;
use crate::sparsify::top_s;

pub const QIHT_ITERS: usize = 50;

/// `1 / ||A||_2^2`.
pub fn qiht_step_size(a: &SensingMatrix) -> f64 {
    let s = a.spectral_norm(100);
    1.0 / (s * s)
}

/// One QIHT recovery: dequantized measurements `q` of `Q(alpha A g)`.
#[derive(Debug, Clone, Copy)]
pub struct QihtProblem<'a> {
    pub q: &'a [f64],
    pub alpha: f64,
}

/// Iterates `z <- H_S(z + mu A^T (q - Q(A z)))` on `z = alpha g`, then
/// rescales the result to the known norm `sqrt(M) / alpha`. Instances share
/// `A` and advance in lockstep.
pub fn qiht_batch(
    problems: &[QihtProblem<'_>],
    a: &SensingMatrix,
    spec: &QuantizerSpec,
    sparsity: usize,
    iters: usize,
    mu: f64,
) -> Result<Vec<Vec<f64>>> {
    let (m, n) = (a.rows(), a.cols());
    for p in problems {
        if p.q.len() != m {
            return Err(Error::dim("QIHT measurements", m, p.q.len()));
        }
    }
    if sparsity == 0 {
        return Ok(vec![vec![0.0; n]; problems.len()]);
    }
    let s = sparsity.min(n);
    let chunk = problems.len().div_ceil(rayon::current_num_threads()).max(1);
    let parts: Vec<Result<Vec<Vec<f64>>>> = problems
        .par_chunks(chunk)
        .map(|part| qiht_chunk(part, a, spec, s, iters, mu))
        .collect();
    let mut out = Vec::with_capacity(problems.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn qiht_chunk(
    problems: &[QihtProblem<'_>],
    a: &SensingMatrix,
    spec: &QuantizerSpec,
    s: usize,
    iters: usize,
    mu: f64,
) -> Result<Vec<Vec<f64>>> {
    let (m, n) = (a.rows(), a.cols());
    let cols = problems.len();
    let mut z = vec![vec![0.0; n]; cols];
    let mut support: Vec<Vec<usize>> = vec![Vec::new(); cols];
    let mut resid = Array2::<f64>::zeros((m, cols).f());
    let mut back = Array2::<f64>::zeros((n, cols).f());
    for _ in 0..iters {
        for (c, p) in problems.iter().enumerate() {
            let mut az = vec![0.0; m];
            for &j in &support[c] {
                let v = z[c][j];
                for (acc, aij) in az.iter_mut().zip(a.matrix().column(j)) {
                    *acc += v * aij;
                }
            }
            let qz = spec.quantize(&az)?;
            for k in 0..m {
                resid[[k, c]] = p.q[k] - qz[k];
            }
        }
        general_mat_mul(1.0, &a.matrix().t(), &resid, 0.0, &mut back);
        for c in 0..cols {
            let proxy: Vec<f64> = (0..n).map(|j| z[c][j] + mu * back[[j, c]]).collect();
            let next = top_s(&proxy, n, s);
            if next.values.iter().any(|v| !v.is_finite()) {
                log::warn!("QIHT produced a non-finite iterate; keeping the previous one");
                continue;
            }
            support[c] = next.support().collect();
            z[c] = next.values;
        }
    }
    Ok(problems
        .iter()
        .zip(z)
        .map(|(p, zc)| {
            let norm = zc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return zc;
            }
            let target = (m as f64).sqrt() / p.alpha;
            zc.into_iter().map(|v| v * target / norm).collect()
        })
        .collect())
}

pub fn qiht_recover(
    q: &[f64],
    alpha: f64,
    a: &SensingMatrix,
    spec: &QuantizerSpec,
    sparsity: usize,
    iters: usize,
) -> Result<Vec<f64>> {
    let mu = qiht_step_size(a);
    Ok(qiht_batch(&[QihtProblem { q, alpha }], a, spec, sparsity, iters, mu)?
        .pop()
        .expect("one result"))
}

/// In-place orthonormal fast Walsh-Hadamard transform (its own inverse).
pub fn fwht(x: &mut [f64]) {
    let n = x.len();
    assert!(n.is_power_of_two(), "Hadamard length must be a power of two");
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (u, v) = (x[j], x[j + h]);
                x[j] = u + v;
                x[j + h] = u - v;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= scale);
}

/// Midrise uniform quantizer with `2^bits` cells over `[-range, range]`;
/// inputs outside the range fall into the outer cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformQuantizer {
    pub bits: u32,
    pub range: f64,
}

impl UniformQuantizer {
    pub fn new(bits: u32, range: f64) -> Result<Self> {
        if bits == 0 || bits > 8 {
            return Err(Error::config("Q", format!("uniform quantizer bits must be in 1..=8, got {bits}")));
        }
        if !(range > 0.0) {
            return Err(Error::config("range", "must be positive"));
        }
        Ok(UniformQuantizer { bits, range })
    }

    pub fn step(&self) -> f64 {
        2.0 * self.range / f64::from(1u32 << self.bits)
    }

    pub fn index(&self, x: f64) -> u8 {
        let cells = 1i64 << self.bits;
        let i = ((x + self.range) / self.step()).floor() as i64;
        i.clamp(0, cells - 1) as u8
    }

    pub fn level(&self, i: u8) -> f64 {
        -self.range + (f64::from(i) + 0.5) * self.step()
    }
}

/// Shared transform of one block: Rademacher signs `D`, orthonormal Hadamard
/// `H` on the zero-padded block, and `M` retained rows `P`.
#[derive(Debug, Clone)]
pub struct DitherCodec {
    block_len: usize,
    padded: usize,
    signs: Vec<f64>,
    rows: Vec<usize>,
    quantizer: UniformQuantizer,
}

/// `Q(alpha y + u)` indices and the gain; `alpha == None` for a zero block.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherPayload {
    pub indices: Vec<u8>,
    pub alpha: Option<f64>,
}

/// Half-width of the uniform quantizer in units of the projected standard
/// deviation.
pub const DITHER_RANGE: f64 = 4.0;

impl DitherCodec {
    pub fn new(block_len: usize, rows: usize, bits: u32, seed: u64, block: u64) -> Result<Self> {
        let padded = block_len.next_power_of_two();
        if rows == 0 || rows > padded {
            return Err(Error::config("M", format!("need 1 <= M <= {padded}, got {rows}")));
        }
        let mut r = rng::stream(seed, "dither-transform", &[block_len as u64, rows as u64, block]);
        let signs = (0..padded)
            .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut kept = sample(&mut r, padded, rows).into_vec();
        kept.sort_unstable();
        Ok(DitherCodec {
            block_len,
            padded,
            signs,
            rows: kept,
            quantizer: UniformQuantizer::new(bits, DITHER_RANGE)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn quantizer(&self) -> &UniformQuantizer {
        &self.quantizer
    }

    fn scale(&self) -> f64 {
        (self.padded as f64 / self.rows.len() as f64).sqrt()
    }

    /// `y = s P H D g` with `s = sqrt(N_pad / M)`, so `E||y||^2 = ||g||^2`.
    pub fn project(&self, g: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; self.padded];
        for (i, (&v, &d)) in g.iter().zip(&self.signs).enumerate() {
            buf[i] = v * d;
        }
        fwht(&mut buf);
        let s = self.scale();
        self.rows.iter().map(|&r| s * buf[r]).collect()
    }

    /// `(1/s) D H^T P^T y`, the orthogonal projection of `g` onto the
    /// retained rows when `y` is noiseless.
    pub fn back_project(&self, y: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; self.padded];
        let s = self.scale();
        for (&r, &v) in self.rows.iter().zip(y) {
            buf[r] = v / s;
        }
        fwht(&mut buf);
        buf.truncate(self.block_len);
        for (v, d) in buf.iter_mut().zip(&self.signs) {
            *v *= d;
        }
        buf
    }

    /// Dither for device `k`, round `t`, block `b`, uniform on `(-D/2, D/2]`.
    pub fn dither(&self, seed: u64, k: u64, t: u64, b: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "dither", &[k, t, b]);
        let half = self.quantizer.step() / 2.0;
        (0..self.rows.len()).map(|_| r.random_range(-half..half)).collect()
    }

    pub fn compress(&self, g: &[f64], dither: &[f64]) -> DitherPayload {
        let y = self.project(g);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return DitherPayload {
                indices: Vec::new(),
                alpha: None,
            };
        }
        let alpha = (y.len() as f64).sqrt() / norm;
        DitherPayload {
            indices: y
                .iter()
                .zip(dither)
                .map(|(v, u)| self.quantizer.index(alpha * v + u))
                .collect(),
            alpha: Some(alpha),
        }
    }

    /// Estimate of `y` from a payload: `(Q(alpha y + u) - u) / alpha`.
    pub fn decode(&self, payload: &DitherPayload, dither: &[f64]) -> Option<Vec<f64>> {
        let alpha = payload.alpha?;
        Some(
            payload
                .indices
                .iter()
                .zip(dither)
                .map(|(&i, u)| (self.quantizer.level(i) - u) / alpha)
                .collect(),
        )
    }
}

/// Per-entry sign with `sign(0) = 0`.
pub fn sign_vector(g: &[f64]) -> Vec<i8> {
    g.iter()
        .map(|&v| {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// `sign(sum_k s_k)` per entry; ties give 0.
pub fn majority_vote(signs: &[Vec<i8>]) -> Result<Vec<f64>> {
    let Some(first) = signs.first() else {
        return Err(Error::InvalidInput("majority vote needs at least one device".into()));
    };
    let n = first.len();
    let mut sum = vec![0i64; n];
    for s in signs {
        if s.len() != n {
            return Err(Error::dim("sign vector", n, s.len()));
        }
        for (acc, &v) in sum.iter_mut().zip(s) {
            *acc += i64::from(v);
        }
    }
    Ok(sum.into_iter().map(|v| v.signum() as f64).collect())
}
