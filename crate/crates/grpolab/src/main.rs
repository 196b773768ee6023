//! Command-line front end; all logic lives in [`grpolab::cli`].

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use grpolab::cli::{cmd_run, cmd_sweep, SweepAxis};

#[derive(Parser)]
#[command(
    name = "grpolab",
    version,
    about = "Deterministic desk-scale training runs for group-relative \
             policy optimization with replayed experience"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once per configured seed and write metrics, checkpoints,
    /// and a summary.
    Run {
        /// Path to a TOML run spec.
        config: PathBuf,
        /// Output directory (overrides GRPOLAB_OUT_DIR and [run].out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single seed instead of [run].seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every variant along one sweep axis and write sweep.csv.
    Sweep {
        /// Path to a TOML run spec with a [sweep] section.
        config: PathBuf,
        /// Which hyperparameter to vary.
        #[arg(long, value_enum)]
        axis: Axis,
        /// Output directory (overrides GRPOLAB_OUT_DIR and [run].out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Strategy,
    GOff,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, out.as_deref(), seed)
            .map(|summary| {
                for run in &summary.runs {
                    println!(
                        "seed {}: {} steps, effective {:.1}%, final accuracy {:.3}",
                        run.seed,
                        run.steps,
                        100.0 * run.effective_step_pct,
                        run.final_train_accuracy
                    );
                }
                println!("wrote {}", summary.out_dir.join("summary.json").display());
            }),
        Command::Sweep { config, axis, out } => {
            let axis = match axis {
                Axis::Strategy => SweepAxis::Strategy,
                Axis::GOff => SweepAxis::GOff,
            };
            cmd_sweep(&config, axis, out.as_deref()).map(|rows| {
                for row in &rows {
                    println!(
                        "{} = {} seed {}: effective {:.1}%, final accuracy {:.3}",
                        row.axis,
                        row.variant,
                        row.seed,
                        100.0 * row.effective_step_pct,
                        row.final_train_accuracy
                    );
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
