use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedqcs::config::{ExperimentConfig, Framework, SweepSpec};
use fedqcs::error::Error;
use fedqcs::federation::{run_experiment, Summary};
use fedqcs::rng;

/// Run a federated learning experiment with compressed gradient uplinks.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: desk, fig3, full or synthetic.
    #[arg(long)]
    preset: Option<String>,
    /// fedqcs_ea, fedqcs_ae, qcs_qiht, qcs_dither, signsgd or perfect.
    #[arg(long)]
    framework: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Run one cell per value, e.g. `Q=1,2,3`; axes Q, R, S_ratio, G.
    #[arg(long)]
    sweep: Option<String>,
    /// Continue from `<out>/checkpoint.bin` if present.
    #[arg(long)]
    resume: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn build_config(args: &Args) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::desk(),
    };
    if let Some(f) = &args.framework {
        cfg.framework = f.parse::<Framework>()?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(t) = args.rounds {
        cfg.rounds = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(s: &Summary) {
    println!(
        "{}: rounds {} accuracy {} nmse(last 10%) {} bits/entry {:.6} total bits {}",
        s.framework,
        s.rounds,
        s.final_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
        s.mean_nmse_last10.map_or("-".into(), |v| format!("{v:.4e}")),
        s.bits_per_entry,
        s.total_bits
    );
}

fn sweep(base: ExperimentConfig, spec: &SweepSpec, resume: bool) -> Result<(), Error> {
    std::fs::create_dir_all(&base.out)?;
    let mut w = csv::Writer::from_path(base.out.join("sweep.csv"))?;
    w.write_record([
        "axis",
        "value",
        "seed",
        "final_accuracy",
        "mean_nmse_last10",
        "bits_per_entry",
        "total_bits",
        "error",
    ])?;
    let mut worst: Option<Error> = None;
    for (i, value) in spec.values.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.seed = rng::derive_seed(base.seed, "sweep", &[i as u64]);
        cfg.out = base.out.join(format!("{}={value}", spec.axis.name()));
        let outcome = cfg
            .set_axis(spec.axis, value)
            .and_then(|()| cfg.validate())
            .and_then(|()| run_experiment(cfg.clone(), Some(&cfg.out), resume));
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        match outcome {
            Ok(exp) => {
                let s = exp.summary();
                report(&s);
                w.write_record([
                    spec.axis.name().to_string(),
                    value.clone(),
                    cfg.seed.to_string(),
                    opt(s.final_accuracy),
                    opt(s.mean_nmse_last10),
                    format!("{:e}", s.bits_per_entry),
                    s.total_bits.to_string(),
                    String::new(),
                ])?;
            }
            Err(e) => {
                eprintln!("{}={value}: {e}", spec.axis.name());
                w.write_record([
                    spec.axis.name().to_string(),
                    value.clone(),
                    cfg.seed.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.to_string(),
                ])?;
                if worst.as_ref().is_none_or(|w| exit_code(&e) > exit_code(w)) {
                    worst = Some(e);
                }
            }
        }
        w.flush()?;
    }
    worst.map_or(Ok(()), Err)
}

fn run(args: &Args) -> Result<(), Error> {
    let cfg = build_config(args)?;
    if let Some(s) = &args.sweep {
        let spec: SweepSpec = s.parse()?;
        return sweep(cfg, &spec, args.resume);
    }
    let out = cfg.out.clone();
    let exp = run_experiment(cfg, Some(&out), args.resume)?;
    report(&exp.summary());
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
