use std::path::PathBuf;
use std::process::ExitCode;

use blockout_cli::{cmd_ablate, cmd_analyze, cmd_eval, cmd_gen_data, cmd_train, Analysis};
use clap::{Parser, Subcommand};

/// Train, evaluate and analyze Blockout networks.
#[derive(Debug, Parser)]
#[command(name = "blockout", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the accuracy of a checkpoint on a BODS dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write CSV analyses of a finished run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        which: Analysis,
    },
    /// Generate the synthetic dataset described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.bods and test.bods.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare dense, soft-learned, hard-fixed and hard-learned training.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let out = cmd_train(&config)?;
            println!("train_accuracy {:.6}", out.train_accuracy);
            if let Some(acc) = out.test_accuracy {
                println!("test_accuracy {acc:.6}");
            }
        }
        Command::Eval { checkpoint, data } => {
            let (acc, n) = cmd_eval(&checkpoint, &data)?;
            println!("accuracy {acc:.6} ({n} examples)");
        }
        Command::Analyze { run, which } => {
            for path in cmd_analyze(&run, which)? {
                println!("{}", path.display());
            }
        }
        Command::GenData { config, out } => {
            let (train, test) = cmd_gen_data(&config, &out)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::Ablate { config, seeds } => print!("{}", cmd_ablate(&config, seeds)?),
    }
    Ok(())
}
