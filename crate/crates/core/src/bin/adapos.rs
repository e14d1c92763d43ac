use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adapos_core::harness::{
    cmd_replicate_grid, cmd_simulate, cmd_sweep, cmd_train, exit_code, ExperimentConfig, Overrides,
};
use adapos_core::training::Strategy;
use adapos_core::Result;

/// Variable-antenna channel charting experiments.
///
/// Exit status: 0 success, 2 configuration error, 3 numeric divergence,
/// 4 I/O error.
#[derive(Parser)]
#[command(name = "adapos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, env = "ADAPOS_CONFIG")]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, env = "ADAPOS_SEED")]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, env = "ADAPOS_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for independent cells.
    #[arg(long, env = "ADAPOS_JOBS", default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                out_dir: self.out.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training and test datasets.
    Simulate(Common),
    /// Train one model on the simulated training set.
    Train {
        #[command(flatten)]
        common: Common,
        /// `fixed-n:<k>` or `random-n`; overrides the config.
        #[arg(long, env = "ADAPOS_STRATEGY")]
        strategy: Option<Strategy>,
    },
    /// Evaluate checkpoints across evaluation antenna counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Simulate, train every strategy for both architectures, and sweep.
    ReplicateGrid(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let r = cmd_simulate(&c.load()?)?;
            println!("wrote {} and {}", r.train.display(), r.test.display());
        }
        Command::Train { common, strategy } => {
            let r = cmd_train(&common.load()?, strategy)?;
            println!(
                "trained {} steps, final loss {:.6}; checkpoint {}",
                r.steps,
                r.final_loss,
                r.checkpoint.display()
            );
        }
        Command::Sweep { common, checkpoints } => {
            let r = cmd_sweep(&common.load()?, &checkpoints, common.jobs)?;
            print!("{}", r.result.to_csv());
            println!("wrote {} and {}", r.csv.display(), r.heatmap.display());
        }
        Command::ReplicateGrid(c) => {
            let r = cmd_replicate_grid(&c.load()?, c.jobs)?;
            println!(
                "{} checkpoints ({} trained, {} resumed)",
                r.checkpoints.len(),
                r.trained.len(),
                r.checkpoints.len() - r.trained.len()
            );
            print!("{}", r.sweep.result.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
