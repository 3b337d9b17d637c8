//! Block partitioning, per-block top-S sparsification and residual feedback.

use crate::error::{Error, Result};

/// Partition of `{0..total_dim}` into `B` disjoint index sets of at most `N`
/// entries each. A shorter set is zero-padded to `N` when a block is
/// extracted; padded positions never enter top-S selection and are dropped
/// on reassembly.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    total_dim: usize,
    block_len: usize,
    index_sets: Vec<Vec<usize>>,
}

impl BlockLayout {
    /// Contiguous layout: block `b` holds entries `[b N, (b + 1) N)`.
    pub fn contiguous(total_dim: usize, num_blocks: usize) -> Result<Self> {
        if num_blocks == 0 || total_dim == 0 {
            return Err(Error::config("num_blocks", "blocks and dimension must be positive"));
        }
        if num_blocks > total_dim {
            return Err(Error::config(
                "num_blocks",
                format!("{num_blocks} blocks exceed dimension {total_dim}"),
            ));
        }
        let block_len = total_dim.div_ceil(num_blocks);
        let index_sets = (0..num_blocks)
            .map(|b| (b * block_len..((b + 1) * block_len).min(total_dim)).collect())
            .collect();
        Ok(BlockLayout {
            total_dim,
            block_len,
            index_sets,
        })
    }

    /// Arbitrary partition; checked to be a disjoint cover of `0..total_dim`.
    pub fn from_index_sets(total_dim: usize, index_sets: Vec<Vec<usize>>) -> Result<Self> {
        if index_sets.is_empty() {
            return Err(Error::config("index_sets", "at least one block required"));
        }
        let mut seen = vec![false; total_dim];
        for set in &index_sets {
            for &i in set {
                if i >= total_dim {
                    return Err(Error::config("index_sets", format!("index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::config("index_sets", format!("index {i} appears twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config("index_sets", format!("index {missing} not covered")));
        }
        let block_len = index_sets.iter().map(Vec::len).max().unwrap_or(0);
        Ok(BlockLayout {
            total_dim,
            block_len,
            index_sets,
        })
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.index_sets.len()
    }

    /// Block length `N` including padding.
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn index_set(&self, b: usize) -> &[usize] {
        &self.index_sets[b]
    }

    /// Number of real (non-padding) entries of block `b`.
    pub fn valid_len(&self, b: usize) -> usize {
        self.index_sets[b].len()
    }

    /// Extracts block `b` of `g`, zero-padded to `block_len`.
    pub fn extract(&self, g: &[f64], b: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.block_len];
        for (slot, &i) in out.iter_mut().zip(&self.index_sets[b]) {
            *slot = g[i];
        }
        out
    }

    pub fn partition(&self, g: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_len(g.len())?;
        Ok((0..self.num_blocks()).map(|b| self.extract(g, b)).collect())
    }

    /// Adds `scale * block` into `out` at the positions of block `b`.
    pub fn scatter_add(&self, block: &[f64], b: usize, scale: f64, out: &mut [f64]) {
        for (&v, &i) in block.iter().zip(&self.index_sets[b]) {
            out[i] += scale * v;
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.total_dim {
            return Err(Error::dim("block layout", self.total_dim, len));
        }
        Ok(())
    }
}

/// A block after top-S selection; `values` has the padded block length.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock {
    pub values: Vec<f64>,
    pub support_size: usize,
}

impl SparseBlock {
    pub fn zeros(len: usize) -> Self {
        SparseBlock {
            values: vec![0.0; len],
            support_size: 0,
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
    }
}

/// `S = floor(s_ratio * N)`, at least 1.
pub fn sparsity_level(s_ratio: f64, block_len: usize) -> usize {
    ((s_ratio * block_len as f64).floor() as usize).clamp(1, block_len)
}

/// Keeps the `s` largest-magnitude entries of the first `valid` positions of
/// `block`; magnitude ties at rank `s` keep the lower index.
pub fn top_s(block: &[f64], valid: usize, s: usize) -> SparseBlock {
    let mut order: Vec<usize> = (0..valid).filter(|&i| block[i] != 0.0).collect();
    let keep = s.min(order.len());
    if keep < order.len() {
        let by_rank = |&a: &usize, &b: &usize| {
            block[b]
                .abs()
                .total_cmp(&block[a].abs())
                .then(a.cmp(&b))
        };
        order.select_nth_unstable_by(keep, by_rank);
        order.truncate(keep);
    }
    let mut values = vec![0.0; block.len()];
    for &i in &order {
        values[i] = block[i];
    }
    SparseBlock {
        values,
        support_size: keep,
    }
}

pub fn block_sparsify(g: &[f64], layout: &BlockLayout, s: usize) -> Result<Vec<SparseBlock>> {
    if s == 0 {
        return Err(Error::config("S", "sparsity level must be at least 1"));
    }
    if s > layout.block_len() {
        return Err(Error::config(
            "S",
            format!("sparsity level {s} exceeds block length {}", layout.block_len()),
        ));
    }
    layout.check_len(g.len())?;
    Ok((0..layout.num_blocks())
        .map(|b| top_s(&layout.extract(g, b), layout.valid_len(b), s))
        .collect())
}

/// Inverse of the partition: writes each block back to its index set.
pub fn concatenate(blocks: &[SparseBlock], layout: &BlockLayout) -> Result<Vec<f64>> {
    concatenate_values(blocks.iter().map(|b| b.values.as_slice()), layout)
}

pub fn concatenate_values<'a>(
    blocks: impl ExactSizeIterator<Item = &'a [f64]>,
    layout: &BlockLayout,
) -> Result<Vec<f64>> {
    if blocks.len() != layout.num_blocks() {
        return Err(Error::dim("concatenate blocks", layout.num_blocks(), blocks.len()));
    }
    let mut out = vec![0.0; layout.total_dim()];
    for (b, block) in blocks.enumerate() {
        if block.len() != layout.block_len() {
            return Err(Error::dim("concatenate block length", layout.block_len(), block.len()));
        }
        for (&v, &i) in block.iter().zip(layout.index_set(b)) {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Error-feedback memory of one device: the gradient mass not yet transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    pub delta: Vec<f64>,
}

impl ResidualState {
    pub fn new(dim: usize) -> Self {
        ResidualState {
            delta: vec![0.0; dim],
        }
    }

    /// Residual-augmented gradient `grad + delta` fed to sparsification.
    pub fn augment(&self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.delta.len() {
            return Err(Error::dim("residual augment", self.delta.len(), grad.len()));
        }
        Ok(grad.iter().zip(&self.delta).map(|(g, d)| g + d).collect())
    }
}

/// `delta <- g_in - Concatenate(transmitted)`.
pub fn accumulate_residual(
    g_in: &[f64],
    transmitted: &[SparseBlock],
    layout: &BlockLayout,
    state: &mut ResidualState,
) -> Result<()> {
    if g_in.len() != state.delta.len() {
        return Err(Error::dim("residual", state.delta.len(), g_in.len()));
    }
    let sent = concatenate(transmitted, layout)?;
    for ((d, g), s) in state.delta.iter_mut().zip(g_in).zip(&sent) {
        *d = g - s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn top_two_of_a_block() {
        let out = top_s(&[3.0, -1.0, 0.5, 2.0], 4, 2);
        assert_eq!(out.values, vec![3.0, 0.0, 0.0, 2.0]);
        assert_eq!(out.support_size, 2);
    }

    #[test]
    fn full_sparsity_is_identity() {
        let g = [0.3, -1.0, 0.0, 2.5];
        let layout = BlockLayout::contiguous(4, 1).unwrap();
        let blocks = block_sparsify(&g, &layout, 4).unwrap();
        assert_eq!(blocks[0].values, g.to_vec());
        assert_eq!(blocks[0].support_size, 3);
    }

    #[test]
    fn ties_keep_lower_index() {
        let out = top_s(&[1.0, -2.0, 2.0, 2.0], 4, 2);
        assert_eq!(out.values, vec![0.0, -2.0, 2.0, 0.0]);
    }

    #[test]
    fn ten_blocks_of_1591() {
        let layout = BlockLayout::contiguous(15_910, 10).unwrap();
        assert_eq!(layout.block_len(), 1591);
        assert!((0..10).all(|b| layout.valid_len(b) == 1591));
    }

    #[test]
    fn uneven_split_pads_last_block() {
        let layout = BlockLayout::contiguous(10, 3).unwrap();
        assert_eq!(layout.block_len(), 4);
        assert_eq!(layout.valid_len(2), 2);
        let g: Vec<f64> = (1..=10).map(f64::from).collect();
        let blocks = layout.partition(&g).unwrap();
        assert_eq!(blocks[2], vec![9.0, 10.0, 0.0, 0.0]);
        let back = concatenate_values(blocks.iter().map(Vec::as_slice), &layout).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn zero_sparsity_is_a_config_error() {
        let layout = BlockLayout::contiguous(4, 1).unwrap();
        assert!(matches!(
            block_sparsify(&[1.0; 4], &layout, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn residual_example() {
        let layout = BlockLayout::contiguous(4, 1).unwrap();
        let g = [3.0, -1.0, 0.5, 2.0];
        let blocks = block_sparsify(&g, &layout, 2).unwrap();
        let mut state = ResidualState::new(4);
        accumulate_residual(&g, &blocks, &layout, &mut state).unwrap();
        assert_eq!(state.delta, vec![0.0, -1.0, 0.5, 0.0]);

        let all = block_sparsify(&g, &layout, 4).unwrap();
        accumulate_residual(&g, &all, &layout, &mut state).unwrap();
        assert!(state.delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let layout = BlockLayout::contiguous(4, 1).unwrap();
        let mut state = ResidualState::new(5);
        let blocks = vec![SparseBlock::zeros(4)];
        assert!(accumulate_residual(&[0.0; 4], &blocks, &layout, &mut state).is_err());
        assert!(concatenate(&[], &layout).is_err());
    }

    #[test]
    fn zero_blocks_give_zero_vector() {
        let layout = BlockLayout::contiguous(12, 3).unwrap();
        let blocks = vec![SparseBlock::zeros(4); 3];
        assert_eq!(concatenate(&blocks, &layout).unwrap(), vec![0.0; 12]);
    }

    #[test]
    fn permuted_index_sets_reassemble() {
        // brute force: every index lands where the permutation says
        let perm = [7usize, 2, 9, 0, 4, 11, 1, 5, 10, 3, 8, 6];
        let sets = perm.chunks(4).map(<[usize]>::to_vec).collect();
        let layout = BlockLayout::from_index_sets(12, sets).unwrap();
        let g: Vec<f64> = (0..12).map(|i| i as f64 * 1.5 - 4.0).collect();
        let blocks = layout.partition(&g).unwrap();
        for (b, block) in blocks.iter().enumerate() {
            for (j, &v) in block.iter().enumerate() {
                assert_eq!(v, g[perm[4 * b + j]]);
            }
        }
        let back = concatenate_values(blocks.iter().map(Vec::as_slice), &layout).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn invalid_index_sets_are_rejected() {
        assert!(BlockLayout::from_index_sets(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(BlockLayout::from_index_sets(3, vec![vec![0, 1]]).is_err());
        assert!(BlockLayout::from_index_sets(3, vec![vec![0, 1, 3]]).is_err());
    }

    proptest! {
        #[test]
        fn partition_round_trips(g in prop::collection::vec(-10.0f64..10.0, 1..60), b in 1usize..8) {
            prop_assume!(b <= g.len());
            let layout = BlockLayout::contiguous(g.len(), b).unwrap();
            let blocks = layout.partition(&g).unwrap();
            let back = concatenate_values(blocks.iter().map(Vec::as_slice), &layout).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn sparsified_energy_and_scaling(
            g in prop::collection::vec(-10.0f64..10.0, 1..40),
            s in 1usize..40,
            c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        ) {
            let n = g.len();
            let s = s.min(n);
            let kept = top_s(&g, n, s);
            let e_in: f64 = g.iter().map(|v| v * v).sum();
            prop_assert!(kept.norm_sq() <= e_in + 1e-12);
            let nnz = g.iter().filter(|v| **v != 0.0).count();
            if nnz <= s {
                prop_assert_eq!(&kept.values, &g);
            }
            prop_assert!(kept.values.iter().filter(|v| **v != 0.0).count() <= s);
            let scaled: Vec<f64> = g.iter().map(|v| c * v).collect();
            let kept_scaled = top_s(&scaled, n, s);
            let expect: Vec<f64> = kept.values.iter().map(|v| c * v).collect();
            prop_assert_eq!(kept_scaled.values, expect);
        }

        #[test]
        fn residual_telescopes(rounds in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 12), 1..6)) {
            let layout = BlockLayout::contiguous(12, 3).unwrap();
            let mut state = ResidualState::new(12);
            let mut sent_sum = vec![0.0; 12];
            let mut raw_sum = vec![0.0; 12];
            for grad in &rounds {
                let g_bar = state.augment(grad).unwrap();
                let blocks = block_sparsify(&g_bar, &layout, 2).unwrap();
                accumulate_residual(&g_bar, &blocks, &layout, &mut state).unwrap();
                for (acc, v) in sent_sum.iter_mut().zip(concatenate(&blocks, &layout).unwrap()) {
                    *acc += v;
                }
                for (acc, v) in raw_sum.iter_mut().zip(grad) {
                    *acc += v;
                }
            }
            for i in 0..12 {
                prop_assert!((sent_sum[i] + state.delta[i] - raw_sum[i]).abs() < 1e-12);
            }
        }
    }
}
