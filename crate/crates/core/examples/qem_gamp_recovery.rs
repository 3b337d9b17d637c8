//! Q-EM-GAMP recovery of a sparse block from 3-bit measurements, learning
//! the Bernoulli Gaussian-mixture prior as it goes.

use fedqcs::bgm::{sample_bgm, BgmParams, Component};
use fedqcs::gamp::{run_gamp, GampOptions, GampProblem, OutputChannel};
use fedqcs::quantizer::QuantizerSpec;
use fedqcs::sensing::{compress_block, SensingMatrix};
use fedqcs::sparsify::top_s;

fn main() -> fedqcs::error::Result<()> {
    let (n, m) = (1591, 530);
    let truth = BgmParams::new(
        0.95,
        vec![
            Component { weight: 0.025, mean: -0.5, var: 0.04 },
            Component { weight: 0.025, mean: 0.5, var: 0.04 },
        ],
    )?;
    let mut r = fedqcs::rng::stream(4, "example", &[]);
    let g = sample_bgm(&truth, n, &mut r)?;
    let block = top_s(&g, n, n);
    let a = SensingMatrix::new(m, n, 9)?;

    for bits in [1, 2, 3, 4] {
        let spec = QuantizerSpec::lloyd_max(bits)?;
        let payload = compress_block(&block, &a, spec)?;
        let channel = OutputChannel::Quantized { indices: &payload.indices, spec };
        let alpha = payload.alpha.expect("non-zero block");
        let problem = GampProblem { channel, alpha, theta0: None, seed: 17 };
        let out = run_gamp(problem, &a, &GampOptions::default())?;
        let err: f64 = out.ghat.iter().zip(&g).map(|(x, y)| (x - y).powi(2)).sum();
        let energy: f64 = g.iter().map(|v| v * v).sum();
        println!(
            "Q={bits}: NMSE {:>7.2} dB after {:>2} iterations, learned lambda0 {:.3}",
            10.0 * (err / energy).log10(),
            out.iterations,
            out.theta.lambda0
        );
    }
    Ok(())
}
