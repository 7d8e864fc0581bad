use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sbi_vfm_cli::{
    cmd_evaluate, cmd_reference, cmd_report, cmd_run, cmd_sample, cmd_simulate, cmd_train, CliError, CliResult,
    ExperimentConfig, RunDir, SampleArgs,
};

#[derive(Parser)]
#[command(name = "sbi-vfm", version, about = "Two-sided flow matching posterior estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat-key TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training set and held-out observations.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of training simulations (default: n_sims).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model on the run's dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw model posterior samples for the held-out observations.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        obs: Option<PathBuf>,
    },
    /// Draw exact reference samples for the held-out observations.
    Reference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        obs: Option<PathBuf>,
    },
    /// C2ST between reference and generated samples.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long = "gen")]
        generated: Option<PathBuf>,
    },
    /// Collect every report under a directory into results.csv.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// All stages for one cell.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> CliResult<(ExperimentConfig, RunDir)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let root = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no run directory: set `out` in the config or pass --out".into()))?;
    Ok((cfg, RunDir::new(root)))
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate { common, n } => {
            let (cfg, run) = resolve(&common)?;
            for f in cmd_simulate(&cfg, &run, n)? {
                println!("{}", f.display());
            }
        }
        Command::Train { common, data } => {
            let (cfg, run) = resolve(&common)?;
            let report = cmd_train(&cfg, &run, data.as_deref())?;
            println!(
                "trained {} steps; best validation loss {:.6} at epoch {}",
                report.steps,
                report.best_val_loss.unwrap_or(f64::NAN),
                report.best_epoch.map_or("-".to_string(), |e| e.to_string())
            );
        }
        Command::Sample {
            common,
            n,
            steps,
            checkpoint,
            obs,
        } => {
            let (cfg, run) = resolve(&common)?;
            let args = SampleArgs {
                checkpoint,
                observations: obs,
                n,
                steps,
            };
            println!("{}", cmd_sample(&cfg, &run, &args)?.display());
        }
        Command::Reference { common, n, obs } => {
            let (cfg, run) = resolve(&common)?;
            println!("{}", cmd_reference(&cfg, &run, obs.as_deref(), n)?.display());
        }
        Command::Evaluate {
            common,
            reference,
            generated,
        } => {
            let (cfg, run) = resolve(&common)?;
            let r = cmd_evaluate(&cfg, &run, reference.as_deref(), generated.as_deref())?;
            println!("c2st {:.4} +- {:.4} over {} observations", r.score, r.sd, r.per_observation.len());
        }
        Command::Report { out } => {
            let (path, rows) = cmd_report(&out)?;
            println!("{} ({rows} rows)", path.display());
        }
        Command::Run { common } => {
            let (cfg, run) = resolve(&common)?;
            let r = cmd_run(&cfg, &run)?;
            println!("c2st {:.4} +- {:.4}", r.score, r.sd);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
