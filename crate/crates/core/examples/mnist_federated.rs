//! Federated MNIST training with any framework, writing the run directory.
//!
//! ```text
//! cargo run --release --example mnist_federated -- fedqcs_ea 200
//! ```

use std::path::PathBuf;

use fedqcs::config::{ExperimentConfig, Framework};
use fedqcs::federation::run_experiment;

fn main() -> fedqcs::error::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let framework: Framework = args.next().as_deref().unwrap_or("fedqcs_ea").parse()?;
    let rounds: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(100);
    let cfg = ExperimentConfig {
        framework,
        rounds,
        eval_every: 10.min(rounds.max(1)),
        out: PathBuf::from(format!("runs/example-{framework}")),
        ..ExperimentConfig::desk()
    };
    let out = cfg.out.clone();
    let exp = run_experiment(cfg, Some(&out), false)?;
    for r in exp.metrics().iter().filter(|r| r.accuracy.is_some()) {
        println!(
            "t={:>4} accuracy {:.4} nmse {}",
            r.t + 1,
            r.accuracy.unwrap_or_default(),
            r.nmse_primary.map_or("-".into(), |v| format!("{v:.3e}"))
        );
    }
    let s = exp.summary();
    println!("{} bits per device per round; outputs in {}", s.bits_per_device_round, out.display());
    Ok(())
}
