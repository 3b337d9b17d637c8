//! The same sparse block through Q-EM-GAMP, QIHT and the dithered linear
//! codec, all at one bit per entry.

use fedqcs::baselines::{qiht_recover, DitherCodec, QIHT_ITERS};
use fedqcs::gamp::{run_gamp, GampOptions, GampProblem, OutputChannel};
use fedqcs::quantizer::QuantizerSpec;
use fedqcs::sensing::{compress_block, SensingMatrix};
use fedqcs::sparsify::top_s;
use rand::Rng;
use rand_distr::StandardNormal;

fn nmse_db(truth: &[f64], est: &[f64]) -> f64 {
    let err: f64 = truth.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum();
    let energy: f64 = truth.iter().map(|v| v * v).sum();
    10.0 * (err / energy).log10()
}

fn main() -> fedqcs::error::Result<()> {
    let (n, m, bits) = (1591, 530, 3);
    let a = SensingMatrix::new(m, n, 5)?;
    let spec = QuantizerSpec::lloyd_max(bits)?;
    let codec = DitherCodec::new(n, m, bits, 5, 0)?;
    let mut r = fedqcs::rng::stream(8, "example", &[]);
    println!("{:>6} {:>10} {:>10} {:>10}", "S", "Q-EM-GAMP", "QIHT", "dither");
    for s in [16, 40, 80, 160] {
        let dense: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let block = top_s(&dense, n, s);
        let g = &block.values;

        let payload = compress_block(&block, &a, spec)?;
        let alpha = payload.alpha.expect("non-zero block");
        let problem = GampProblem {
            channel: OutputChannel::Quantized { indices: &payload.indices, spec },
            alpha,
            theta0: None,
            seed: 1,
        };
        let gamp = run_gamp(problem, &a, &GampOptions::default())?;
        let qiht = qiht_recover(&payload.dequantize(spec), alpha, &a, spec, s, QIHT_ITERS)?;

        let u = codec.dither(1, 0, 0, 0);
        let sent = codec.compress(g, &u);
        let lin = codec.back_project(&codec.decode(&sent, &u).expect("non-zero block"));

        println!(
            "{s:>6} {:>10.2} {:>10.2} {:>10.2}",
            nmse_db(g, &gamp.ghat),
            nmse_db(g, &qiht),
            nmse_db(g, &lin)
        );
    }
    println!("(NMSE in dB)");
    Ok(())
}
