use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subp::bench::{BenchMode, BenchShape};
use subp_cli::commands::{self, BenchOptions, InferOptions};
use subp_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "subp", version, about = "Train, export, run and benchmark uniform 1xN block-sparse CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value config; writes checkpoint.json and metrics.csv to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a checkpoint to a .subp file.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a .subp file on the validation split described by a config.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also run the decoded dense model and fail if predictions differ.
        #[arg(long)]
        compare_dense: bool,
        /// Write per-sample predictions as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Time dense, uniform, nonuniform and skewed kernels on one conv layer.
    Bench {
        /// C_out,C_in,Kh,Kw,H,W[,batch]
        #[arg(long, default_value = "256,256,3,3,16,16")]
        shape: BenchShape,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        /// Comma-separated list of dense, uniform, nonuniform, skewed.
        #[arg(long, value_delimiter = ',', default_value = "dense,uniform")]
        mode: Vec<BenchMode>,
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append rows to this CSV instead of printing them.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the dataset described by a config in the raw binary layout.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Export { checkpoint, out } => commands::export(&checkpoint, &out),
        Command::Infer { model, config, workers, compare_dense, predictions } => {
            commands::infer(&model, &config, &InferOptions { workers, compare_dense, predictions })
        }
        Command::Bench { shape, n, p, mode, workers, warmup, repeats, seed, out } => {
            commands::bench(&BenchOptions { shape, n, p, modes: mode, workers, warmup, repeats, seed, out })
        }
        Command::Dataset { config, out } => commands::dataset(&config, &out),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let msg = first.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error:usage: {}", one_line(msg));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            let _ = writeln!(std::io::stdout(), "{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error:{}: {}", e.category(), one_line(&e.to_string()));
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                _ => 1,
            })
        }
    }
}
