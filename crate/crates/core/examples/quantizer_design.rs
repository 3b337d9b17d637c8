//! Lloyd-Max quantizers for N(0, 1) and their Bussgang constants.
//!
//! ```text
//! cargo run --release --example quantizer_design
//! ```

use fedqcs::quantizer::QuantizerSpec;

fn main() -> fedqcs::error::Result<()> {
    println!("{:>2} {:>10} {:>10} {:>10} {:>10}", "Q", "gamma", "psi", "kappa", "mse");
    for bits in 1..=6 {
        let spec = QuantizerSpec::lloyd_max(bits)?;
        let c = spec.constants();
        println!(
            "{bits:>2} {:>10.6} {:>10.6} {:>10.6} {:>10.3e}",
            c.gamma,
            c.psi,
            c.kappa,
            spec.mse()
        );
    }

    let spec = QuantizerSpec::lloyd_max(2)?;
    println!("\n2-bit levels     {:?}", spec.levels());
    println!("2-bit thresholds {:?}", spec.thresholds());
    let x = [-1.7, -0.2, 0.4, 2.5];
    println!("Q({x:?}) = {:?}", spec.quantize(&x)?);
    Ok(())
}
