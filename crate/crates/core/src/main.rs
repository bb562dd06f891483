use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sheath_smn::bench::{self, ExperimentConfig};
use sheath_smn::physics::{self, ChannelParams};

#[derive(Parser)]
#[command(name = "smn", version, about = "Plasma-sheath channel simulator and SMN receiver benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// SER against SNR for every receiver and pilot interval.
    SerSweep(Common),
    /// Curve snapshots through pretraining and EM.
    Snapshots(Common),
    /// Learned fading estimate against the true gains.
    Fading(Common),
    /// Checks the closed-form propagation constant against the complex root.
    ValidatePhysics(Common),
    /// Runs the quick invariant suite.
    Selftest(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML experiment file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (else `out_dir` from the config, else $SHEATH_SMN_OUT, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated SNR list in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    /// Comma-separated pilot intervals.
    #[arg(long, value_delimiter = ',')]
    interval: Option<Vec<usize>>,
}

enum Failure {
    Usage(String),
    Run(String),
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("config file not found: {}", path.display())));
            }
            ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    if let Some(snr) = &common.snr {
        config.snr_db = snr.clone();
        config.fading_snr_db = snr.clone();
        if let Some(&first) = snr.first() {
            config.snapshot_snr_db = first;
        }
    }
    if let Some(intervals) = &common.interval {
        config.pilot_intervals = intervals.clone();
        if let Some(&first) = intervals.first() {
            config.snapshot_interval = first;
            config.fading_interval = first;
        }
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn run(command: Command) -> Result<(), Failure> {
    let err = |e: sheath_smn::Error| Failure::Run(e.to_string());
    match command {
        Command::SerSweep(common) => {
            let config = load(&common)?;
            let dir = config.resolve_out_dir();
            let (report, _) = bench::write_ser_sweep(&config, &dir).map_err(err)?;
            println!("{:<13} {:>7} {:>8} {:>10} {:>8}", "receiver", "snr_db", "interval", "ser", "failed");
            for r in &report.records {
                println!(
                    "{:<13} {:>7.1} {:>8} {:>10.5} {:>8}",
                    r.receiver.as_str(),
                    r.snr_db,
                    r.pilot_interval,
                    r.ser,
                    r.failed_trials
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Snapshots(common) => {
            let config = load(&common)?;
            let dir = config.resolve_out_dir();
            let (report, files) = bench::write_learning_snapshots(&config, &dir).map_err(err)?;
            for s in &report.snapshots {
                match s.mean_max_posterior {
                    Some(p) => println!("{:<9} step {:>5}  mean max posterior {p:.4}", s.stage, s.step),
                    None => println!("{:<9} step {:>5}", s.stage, s.step),
                }
            }
            println!(
                "{} pilots; wrote {} files to {}",
                report.scenario.frame.pilot_positions().len(),
                files.len(),
                dir.display()
            );
        }
        Command::Fading(common) => {
            let config = load(&common)?;
            let dir = config.resolve_out_dir();
            let (results, _) = bench::write_fading_estimation(&config, &dir).map_err(err)?;
            println!("{:>7} {:>10} {:>10}", "snr_db", "rmse", "ser");
            for r in &results {
                println!("{:>7.1} {:>10.5} {:>10.5}", r.snr_db, r.rmse, r.ser);
            }
            println!("wrote {}", dir.display());
        }
        Command::ValidatePhysics(common) => {
            let config = load(&common)?;
            let params: ChannelParams = config.channel().map_err(err)?;
            let worst = physics::consistency_check(&params, 1000).map_err(err)?;
            println!("sheath thickness {:.6e} m", params.sheath_thickness);
            println!("worst relative error over 1000 densities: {worst:.3e}");
            if worst >= 1e-10 {
                return Err(Failure::Run("consistency above 1e-10".into()));
            }
        }
        Command::Selftest(common) => {
            let config = load(&common)?;
            let checks = bench::selftest(config.seed);
            for c in &checks {
                println!("{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Failure::Run("self-test failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
