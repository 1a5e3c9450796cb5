use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edm_downscale::config::{Overrides, RunConfig};
use edm_downscale::pipeline::{Method, ModelKind, Run};

/// Synthetic-climate super-resolution: data, training, sampling, evaluation.
///
/// Runs write to `output_dir` from the config, else
/// `$EDM_DOWNSCALE_OUT/<run_name>`, else `runs/<run_name>`.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate fine, coarse and perturbed fields, forcing and norm stats.
    GenData,
    /// Train one model, or all of them.
    Train {
        /// denoiser-cond, denoiser-uncond or regressor.
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Super-resolve the held-out coarse inputs.
    Sample {
        /// bicubic, regressor, conditional-edm or posterior-edm.
        #[arg(long)]
        method: Method,
        /// Ensemble size (overrides the config).
        #[arg(long)]
        ensemble: Option<usize>,
    },
    /// Score predictions against the held-out truth.
    Evaluate {
        /// Restrict to one method; default is every prediction present.
        #[arg(long)]
        method: Option<Method>,
    },
}

fn run(cli: Cli) -> edm_downscale::Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ensemble = match &cli.command {
        Command::Sample { ensemble, .. } => *ensemble,
        _ => None,
    };
    config.apply(&Overrides {
        seed: cli.seed,
        n_ensemble: ensemble,
    });
    let run = Run::new(config)?;
    match cli.command {
        Command::GenData => {
            run.gen_data()?;
        }
        Command::Train { model } => {
            let data = run.load_data()?;
            let kinds = model.map(|m| vec![m]).unwrap_or_else(|| ModelKind::ALL.to_vec());
            for k in kinds {
                let losses = run.train(k, &data)?;
                println!("{k}: {} steps, final loss {:.4e}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
            }
        }
        Command::Sample { method, .. } => {
            let data = run.load_data()?;
            let p = run.sample(method, &data)?;
            println!("{method}: {} member(s), {} clamped precipitation value(s)", p.members.len(), p.clamped);
        }
        Command::Evaluate { method } => {
            let data = run.load_data()?;
            let methods = method.map(|m| vec![m]);
            let report = run.evaluate(methods.as_deref(), &data)?;
            for r in report.rows.iter().filter(|r| r.metric == "rmse_climatology") {
                println!("{:<16} {:<14} rmse {:.4e} rank {}", r.model, r.channel, r.value, r.rank.unwrap_or(0));
            }
        }
    }
    println!("run directory: {}", run.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
