//! Fixed SGD rate of the convergence result for a few error levels, and the
//! measured reconstruction error ratio of a short MNIST run.

use fedqcs::analysis::{theorem2_rate, ConvergenceParams};
use fedqcs::config::{ExperimentConfig, OptimizerSetting};
use fedqcs::federation::Experiment;

fn main() -> fedqcs::error::Result<()> {
    println!("{:>8} {:>12} {:>12}", "epsilon", "eta", "bound");
    for epsilon in [0.0, 0.05, 0.2, 0.5, 0.8] {
        let p = ConvergenceParams { beta: 10.0, sigma2: 1.0, epsilon, rounds: 2000, loss_gap: 2.3 };
        let (eta, rhs) = theorem2_rate(&p)?;
        println!("{epsilon:>8.2} {eta:>12.3e} {rhs:>12.4}");
    }

    let cfg = ExperimentConfig {
        rounds: 20,
        eval_every: 10,
        measure_epsilon: true,
        optimizer: OptimizerSetting::SgdTheorem2 { beta: 10.0, epsilon: 0.2 },
        ..ExperimentConfig::desk()
    };
    let mut exp = Experiment::new(cfg)?;
    exp.run_to_end(None)?;
    let s = exp.summary();
    println!(
        "\n20 rounds of FedQCS-EA with SGD: accuracy {:.3}, max epsilon {:.3}",
        s.final_accuracy.unwrap_or(0.0),
        s.epsilon_max.unwrap_or(f64::NAN)
    );
    Ok(())
}
