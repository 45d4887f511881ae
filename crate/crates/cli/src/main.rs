use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use shnd_core::config::{ExperimentConfig, Overrides};
use shnd_core::experiments;

#[derive(Parser)]
#[command(name = "shnd", version, about = "Train, simulate and audit stable Hamiltonian neural dynamics")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// shnd, phs, sd-mlp or sd-icnn.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    train_size: Option<usize>,
    #[arg(long, global = true)]
    test_size: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.csv and test.csv sampled from the pendulum.
    GenData,
    /// Train one model; writes a checkpoint and a per-epoch log.
    Train,
    /// Simulate a checkpoint against the pendulum from rest states.
    Simulate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Simulated time in seconds.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Final losses against training-set size.
    SweepData,
    /// Final SHND losses against nu / mu.
    SweepRatio,
    /// Run every applicable audit on a checkpoint; exits 1 on any failure.
    Check {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let c = cli.common;
    let (horizon, dt) = match &cli.command {
        Command::Simulate { horizon, dt, .. } => (*horizon, *dt),
        _ => (None, None),
    };
    let overrides = Overrides {
        model: c.model,
        seed: c.seed,
        out_dir: c.out_dir,
        train_size: c.train_size,
        test_size: c.test_size,
        epochs: c.epochs,
        horizon,
        dt,
    };
    let cfg = ExperimentConfig::resolve(c.config.as_deref(), &overrides).context("loading configuration")?;
    match cli.command {
        Command::GenData => {
            let out = experiments::cmd_gen_data(&cfg)?;
            println!("wrote {} ({} rows)", out.train_path.display(), out.train_rows);
            println!("wrote {} ({} rows)", out.test_path.display(), out.test_rows);
        }
        Command::Train => {
            let out = experiments::cmd_train(&cfg)?;
            if let Some(r) = out.history.records.last() {
                println!("epoch {}: train {:.6e}, test {:.6e}", r.epoch, r.train_loss, r.test_loss);
            }
            println!("wrote {}", out.checkpoint.display());
            println!("wrote {}", out.log.display());
        }
        Command::Simulate { checkpoint, .. } => {
            let out = experiments::cmd_simulate(&cfg, checkpoint.as_deref())?;
            println!(
                "mean error: final {:.6e}, peak {:.6e}",
                out.report.final_mean(),
                out.report.peak_mean()
            );
            if let Some(s) = out.stability {
                println!("stability violations: {}", s.violations());
            }
            println!("wrote {}", out.report_path.display());
            for p in &out.trajectory_paths {
                println!("wrote {}", p.display());
            }
        }
        Command::SweepData => {
            for p in experiments::cmd_sweep_datasize(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::SweepRatio => {
            for p in experiments::cmd_sweep_ratio(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Check { checkpoint } => {
            let report = experiments::cmd_check(&cfg, checkpoint.as_deref())?;
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
