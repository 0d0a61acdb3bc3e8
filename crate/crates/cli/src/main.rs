use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use daekan::report::{write_atomic, write_comparison};
use daekan::{
    pendulum_driftoff, run_experiment, EvaluationGrid, IntegratorSettings, TrainingConfig,
};

#[derive(Parser)]
#[command(
    name = "daekan",
    version,
    about = "Train KAN and MLP solvers for benchmark DAEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the networks described by a config file and write a run report.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate the config and print the resolved settings without training.
        #[arg(long)]
        dry_run: bool,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Integrate the λ-eliminated pendulum with DOPRI5 and record constraint drift.
    Driftoff {
        #[arg(long, default_value = "pendulum")]
        system: String,
        #[arg(long, default_value_t = 100.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-8)]
        rtol: f64,
        /// Defaults to the relative tolerance.
        #[arg(long)]
        atol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect RE tables from finished run directories of one system.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve {
            config,
            out,
            dry_run,
            seed,
        } => {
            if dry_run {
                let mut c = TrainingConfig::from_file(&config)
                    .with_context(|| format!("loading {}", config.display()))?;
                if let Some(seed) = seed {
                    c.seed = seed;
                }
                let pair = c.build_pair()?;
                print!("{}", c.to_toml_string()?);
                println!("# parameters = {}", pair.parameter_count());
                return Ok(());
            }
            let Some(out) = out else {
                bail!("--out is required unless --dry-run is given");
            };
            let report = run_experiment(&config, &out, seed)
                .with_context(|| format!("running {}", config.display()))?;
            for (v, re) in report.variables.iter().zip(&report.re) {
                println!("RE({v}) = {re:.3e}");
            }
            println!("wrote {}", out.display());
        }
        Command::Driftoff {
            system,
            horizon,
            rtol,
            atol,
            out,
        } => {
            if system != "pendulum" {
                bail!("drift-off baseline is only defined for the pendulum, got `{system}`");
            }
            let settings = IntegratorSettings {
                rtol,
                atol: atol.unwrap_or(rtol),
                ..IntegratorSettings::default()
            };
            // validates horizon > 0 the same way as the evaluation grid
            EvaluationGrid::new(horizon, 2).context("horizon must be positive")?;
            let table = pendulum_driftoff(&settings, horizon)?;
            std::fs::create_dir_all(&out)?;
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            write_atomic(&out.join("driftoff.csv"), &csv)?;
            let tenth = horizon / 10.0;
            println!(
                "{} steps ({} rejected); max |x²+y²−1| first tenth {:.3e}, last tenth {:.3e}",
                table.times.len() - 1,
                table.trajectory.rejected,
                table.max_position_residual(0.0, tenth),
                table.max_position_residual(horizon - tenth, horizon)
            );
        }
        Command::Compare { runs, out } => {
            let table = write_comparison(&runs, &out)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
