//! Shared Gaussian sensing matrix, scaled projection and payload accounting.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quantizer::QuantizerSpec;
use crate::rng;
use crate::sparsify::SparseBlock;

/// Bits used to send the per-block gain.
pub const ALPHA_BITS: u64 = 32;

/// `M x N` matrix with IID `N(0, 1/M)` entries, regenerated bit-exactly from
/// `seed` by every party. The elementwise square is cached for the variance
/// recursions of message passing.
#[derive(Debug, Clone)]
pub struct SensingMatrix {
    seed: u64,
    a: Array2<f64>,
    a_sq: Array2<f64>,
}

impl SensingMatrix {
    /// Fails when `m > n`. `m == n` is accepted as the uncompressed reference.
    pub fn new(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::config("M", "matrix dimensions must be positive"));
        }
        if m > n {
            return Err(Error::config(
                "M",
                format!("measurement count {m} exceeds block length {n}: no compression"),
            ));
        }
        Ok(Self::gaussian(m, n, seed))
    }

    /// Same distribution without the compression check (test fixtures, oracles).
    pub fn gaussian(m: usize, n: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "sensing-matrix", &[m as u64, n as u64]);
        let scale = 1.0 / (m as f64).sqrt();
        let a = Array2::from_shape_simple_fn((m, n), || {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        Self::from_array(a, seed)
    }

    pub fn from_array(a: Array2<f64>, seed: u64) -> Self {
        let a_sq = a.mapv(|v| v * v);
        SensingMatrix { seed, a, a_sq }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn squared(&self) -> &Array2<f64> {
        &self.a_sq
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        self.a.dot(&ndarray::ArrayView1::from(g)).to_vec()
    }

    /// `A g` touching only the columns in the support of `block`.
    pub fn apply_sparse(&self, block: &SparseBlock) -> Vec<f64> {
        let mut out = Array1::<f64>::zeros(self.rows());
        for j in block.support() {
            out.scaled_add(block.values[j], &self.a.column(j));
        }
        out.to_vec()
    }

    /// Largest singular value by power iteration on `A^T A`.
    pub fn spectral_norm(&self, iters: usize) -> f64 {
        let n = self.cols();
        let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
        let mut sigma = 0.0;
        for _ in 0..iters.max(1) {
            let av = self.a.dot(&v);
            let w = self.a.t().dot(&av);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            sigma = norm.sqrt();
            v = w / norm;
        }
        sigma
    }
}

/// `M = floor(N / R)` (at least 1).
pub fn measurement_count(block_len: usize, ratio: f64) -> Result<usize> {
    if !(ratio >= 1.0) {
        return Err(Error::config("R", format!("dimension reduction ratio must be >= 1, got {ratio}")));
    }
    Ok(((block_len as f64 / ratio).floor() as usize).max(1))
}

/// Per-block device payload: level indices of `Q(alpha A g)` and the gain.
/// `alpha == None` flags an all-zero block; the server treats it as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    pub indices: Vec<u8>,
    pub alpha: Option<f64>,
}

impl CompressedBlock {
    pub fn empty() -> Self {
        CompressedBlock {
            indices: Vec::new(),
            alpha: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_none()
    }

    pub fn dequantize(&self, spec: &QuantizerSpec) -> Vec<f64> {
        self.indices.iter().map(|&i| spec.level(i as usize)).collect()
    }
}

/// `alpha = sqrt(M) / ||g||`, `x = alpha A g`. `None` for a zero block.
pub fn project(block: &SparseBlock, a: &SensingMatrix) -> Result<Option<(Vec<f64>, f64)>> {
    if block.values.len() != a.cols() {
        return Err(Error::dim("projection", a.cols(), block.values.len()));
    }
    let norm = block.norm_sq().sqrt();
    if norm == 0.0 {
        return Ok(None);
    }
    let alpha = (a.rows() as f64).sqrt() / norm;
    let mut x = a.apply_sparse(block);
    x.iter_mut().for_each(|v| *v *= alpha);
    Ok(Some((x, alpha)))
}

/// Projection followed by entrywise quantization.
pub fn compress_block(
    block: &SparseBlock,
    a: &SensingMatrix,
    spec: &QuantizerSpec,
) -> Result<CompressedBlock> {
    match project(block, a)? {
        None => Ok(CompressedBlock::empty()),
        Some((x, alpha)) => Ok(CompressedBlock {
            indices: spec.quantize_indices(&x)?,
            alpha: Some(alpha),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OverheadReport {
    pub bits: u32,
    pub rows: usize,
    pub blocks: usize,
    pub block_len: usize,
}

impl OverheadReport {
    /// `Q M B / (N B)`; the gain bits are reported separately.
    pub fn bits_per_entry(&self) -> f64 {
        (u64::from(self.bits) * self.rows as u64 * self.blocks as u64) as f64
            / (self.block_len * self.blocks) as f64
    }

    /// `N / M`, the ratio actually realised after flooring `M`.
    pub fn effective_ratio(&self) -> f64 {
        self.block_len as f64 / self.rows as f64
    }

    pub fn payload_bits_per_block(&self) -> u64 {
        u64::from(self.bits) * self.rows as u64 + ALPHA_BITS
    }

    pub fn payload_bits_per_device(&self) -> u64 {
        self.payload_bits_per_block() * self.blocks as u64
    }
}

pub fn overhead_bits(bits: u32, rows: usize, blocks: usize, block_len: usize) -> OverheadReport {
    OverheadReport {
        bits,
        rows,
        blocks,
        block_len,
    }
}

/// `Q / R` for a nominal ratio.
pub fn nominal_bits_per_entry(bits: u32, ratio: f64) -> f64 {
    f64::from(bits) / ratio
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ratio_three_measurements() {
        assert_eq!(measurement_count(1591, 3.0).unwrap(), 530);
        assert!(measurement_count(1591, 0.5).is_err());
    }

    #[test]
    fn more_rows_than_columns_is_rejected() {
        assert!(matches!(SensingMatrix::new(11, 10, 1), Err(Error::Config { .. })));
        assert!(SensingMatrix::new(10, 10, 1).is_ok());
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = SensingMatrix::new(20, 50, 99).unwrap();
        let b = SensingMatrix::new(20, 50, 99).unwrap();
        let c = SensingMatrix::new(20, 50, 100).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert_ne!(a.matrix(), c.matrix());
    }

    #[test]
    fn entry_statistics() {
        let (m, n) = (200, 600);
        let a = SensingMatrix::new(m, n, 3).unwrap();
        let count = (m * n) as f64;
        let mean = a.matrix().sum() / count;
        let var = a.matrix().mapv(|v| (v - mean).powi(2)).sum() / count;
        let sigma2 = 1.0 / m as f64;
        assert!(mean.abs() < 3.0 * (sigma2 / count).sqrt());
        // var of the sample variance of a Gaussian: 2 sigma^4 / count
        assert!((var - sigma2).abs() < 3.0 * (2.0 / count).sqrt() * sigma2);
    }

    #[test]
    fn gain_formula() {
        let a = SensingMatrix::new(4, 8, 1).unwrap();
        let mut values = vec![0.0; 8];
        values[1] = 3.0;
        values[6] = -4.0;
        let block = SparseBlock { values, support_size: 2 };
        let (x, alpha) = project(&block, &a).unwrap().unwrap();
        assert_relative_eq!(alpha, 2.0 / 5.0, epsilon = 1e-15);
        let dense = a.apply(&block.values);
        for (xi, di) in x.iter().zip(dense) {
            assert_relative_eq!(*xi, alpha * di, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_block_is_flagged_empty() {
        let a = SensingMatrix::new(4, 8, 1).unwrap();
        let spec = QuantizerSpec::lloyd_max(2).unwrap();
        let payload = compress_block(&SparseBlock::zeros(8), &a, spec).unwrap();
        assert!(payload.is_empty());
    }

    #[test]
    fn projected_power_is_unit_per_entry() {
        // average over independent matrix draws of ||x||^2 / M
        let (m, n) = (500, 1500);
        let mut values = vec![0.0; n];
        for (i, v) in values.iter_mut().enumerate().step_by(7) {
            *v = ((i * 37 % 11) as f64 - 5.0) / 3.0 + 0.1;
        }
        let support_size = values.iter().filter(|v| **v != 0.0).count();
        let block = SparseBlock { values, support_size };
        let draws = 20;
        let mut total = 0.0;
        for seed in 0..draws {
            let a = SensingMatrix::new(m, n, seed).unwrap();
            let (x, _) = project(&block, &a).unwrap().unwrap();
            total += x.iter().map(|v| v * v).sum::<f64>() / m as f64;
        }
        let mean = total / draws as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn overhead_examples() {
        assert_relative_eq!(nominal_bits_per_entry(3, 3.0), 1.0);
        assert_relative_eq!(nominal_bits_per_entry(1, 3.0), 1.0 / 3.0);
        assert_relative_eq!(nominal_bits_per_entry(2, 4.0), 0.5);
        let r = overhead_bits(3, 530, 10, 1591);
        assert_eq!(r.payload_bits_per_block(), 3 * 530 + 32);
        assert_eq!(r.bits_per_entry(), 3.0 * 530.0 / 1591.0);
    }

    #[test]
    fn spectral_norm_of_scaled_identity() {
        let a = SensingMatrix::from_array(Array2::eye(5) * 2.0, 0);
        assert_relative_eq!(a.spectral_norm(50), 2.0, epsilon = 1e-12);
    }
}
