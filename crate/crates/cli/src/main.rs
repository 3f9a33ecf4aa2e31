use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ttlstm_core::commands::{cmd_bench, cmd_eval, cmd_info, cmd_train, BenchArgs, InfoArgs, TrainArgs};
use ttlstm_core::report::to_csv;
use ttlstm_core::Result;

/// Tensor-train compressed LSTM language models.
#[derive(Debug, Parser)]
#[command(name = "ttlstm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with train.txt, valid.txt and test.txt, or a single file.
        #[arg(long)]
        corpus: PathBuf,
        /// Dense model used for distillation.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Covariance file written by `info --out`; computed from the
        /// teacher when omitted.
        #[arg(long)]
        covariance: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run log; defaults to `<out>.runs.csv`.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Perplexity of a model on a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Time forward passes.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        runs: usize,
        #[arg(long, default_value_t = 2)]
        discard: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Multiply with reconstructed dense gate matrices.
        #[arg(long)]
        dense: bool,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Storage and operation counts of a config or model.
    Info {
        #[arg(long, conflicts_with = "model")]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Covariance file whose eigenvalue extremes are reported.
        #[arg(long)]
        covariance: Option<PathBuf>,
        /// With --model and --out: collect the model's input covariances on
        /// the training split.
        #[arg(long, requires = "model", requires = "out")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train {
            config,
            corpus,
            teacher,
            covariance,
            out,
            seed,
            records,
        } => {
            let summary = cmd_train(&TrainArgs {
                config,
                corpus,
                teacher,
                covariance,
                out,
                seed,
                records,
            })?;
            to_csv(&summary.records)
        }
        Command::Eval { model, corpus, records } => to_csv(&[cmd_eval(&model, &corpus, records.as_deref())?]),
        Command::Bench {
            model,
            corpus,
            runs,
            discard,
            threads,
            dense,
            records,
        } => to_csv(&[cmd_bench(&BenchArgs {
            model,
            corpus,
            runs,
            discard,
            threads,
            dense,
            records,
        })?]),
        Command::Info {
            config,
            model,
            covariance,
            corpus,
            out,
        } => Ok(cmd_info(&InfoArgs {
            config,
            model,
            covariance,
            corpus,
            out,
        })?
        .csv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ttlstm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
