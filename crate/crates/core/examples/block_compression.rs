//! Device side of one round: residual feedback, block sparsification,
//! projection and quantization of a gradient, with the bit count it costs.

use fedqcs::quantizer::QuantizerSpec;
use fedqcs::sensing::{compress_block, measurement_count, overhead_bits, SensingMatrix};
use fedqcs::sparsify::{accumulate_residual, block_sparsify, sparsity_level, BlockLayout, ResidualState};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> fedqcs::error::Result<()> {
    let (dim, blocks, ratio, bits) = (15_910, 10, 3.0, 3);
    let layout = BlockLayout::contiguous(dim, blocks)?;
    let n = layout.block_len();
    let m = measurement_count(n, ratio)?;
    let s = sparsity_level(0.05, n);
    let a = SensingMatrix::new(m, n, 1)?;
    let spec = QuantizerSpec::lloyd_max(bits)?;
    println!("N = {n}, M = {m}, S = {s}");

    let mut residual = ResidualState::new(dim);
    let mut r = fedqcs::rng::stream(1, "example", &[]);
    for round in 0..3 {
        let grad: Vec<f64> = (0..dim)
            .map(|_| r.sample::<f64, _>(StandardNormal) * 1e-2)
            .collect();
        let augmented = residual.augment(&grad)?;
        let sparse = block_sparsify(&augmented, &layout, s)?;
        accumulate_residual(&augmented, &sparse, &layout, &mut residual)?;
        let payload: Vec<_> = sparse
            .iter()
            .map(|b| compress_block(b, &a, spec))
            .collect::<Result<_, _>>()?;
        let kept: usize = sparse.iter().map(|b| b.support_size).sum();
        let held: f64 = residual.delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "round {round}: kept {kept} entries, residual norm {held:.4}, first gain {:.1}",
            payload[0].alpha.unwrap_or(0.0)
        );
    }

    let o = overhead_bits(bits, m, blocks, n);
    println!(
        "{} bits per device per round, {:.4} bits per entry (R_eff = {:.4})",
        o.payload_bits_per_device(),
        o.bits_per_entry(),
        o.effective_ratio()
    );
    Ok(())
}
