//! Closed-form MSE bound of aggregate-and-estimate recovery against a
//! simulated run on Bernoulli-Gaussian gradients.

use fedqcs::analysis::{theorem1_bound, BoundInputs};
use fedqcs::bgm::{BgmParams, Component};
use fedqcs::config::{DataConfig, ExperimentConfig, Framework};
use fedqcs::federation::Experiment;
use fedqcs::quantizer::QuantizerSpec;

fn main() -> fedqcs::error::Result<()> {
    let theta = BgmParams::new(0.9, vec![Component { weight: 0.1, mean: 0.0, var: 1.0 }])?;

    println!("bound per entry for K = 4 devices, N = 1591:");
    println!("{:>4} {:>10} {:>10} {:>10}", "Q", "R=2", "R=3", "R=4");
    for bits in 1..=4 {
        let kappa = QuantizerSpec::lloyd_max(bits)?.kappa();
        let row: Vec<String> = [2.0, 3.0, 4.0]
            .iter()
            .map(|&r| {
                let inputs = BoundInputs::iid(&theta, &[0.25; 4], 1, r, kappa, 1591);
                format!("{:>10.4}", theorem1_bound(&inputs).unwrap() / 1591.0)
            })
            .collect();
        println!("{bits:>4} {}", row.join(" "));
    }

    let cfg = ExperimentConfig {
        framework: Framework::FedqcsAe,
        devices: 4,
        blocks: 1,
        rounds: 20,
        data: DataConfig::Synthetic { theta, dimension: 1591 },
        ..ExperimentConfig::synthetic()
    };
    let mut exp = Experiment::new(cfg)?;
    exp.run_to_end(None)?;
    let mse: Vec<f64> = exp.metrics().iter().filter_map(|r| r.mse).collect();
    let mean = mse.iter().sum::<f64>() / mse.len() as f64;
    let bound = exp.mse_bound().expect("synthetic aggregate run");
    println!("\nQ=3 R=3 simulated MSE {mean:.2} over {} draws, bound {bound:.2}", mse.len());
    Ok(())
}
