use std::path::PathBuf;
use std::process::ExitCode;

use catch_cli::{GenerateArgs, ScoreArgs, TrainArgs};
use catch_core::scoring::ScoreMode;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "catch", version, about = "Frequency-patching multivariate anomaly detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test pair with injected anomalies.
    Generate {
        /// global, contextual, shapelet, seasonal, trend or mixed
        #[arg(long = "type")]
        kind: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long)]
        train_length: Option<usize>,
        #[arg(long)]
        test_length: Option<usize>,
    },
    /// Fit a model to `<data>/train.csv`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-point anomaly scores for a CSV (or `<dir>/test.csv`).
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "scores.csv")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        score_lambda: Option<f64>,
        #[arg(long)]
        inference_patch_size: Option<usize>,
        #[arg(long)]
        score_mode: Option<ScoreMode>,
        #[arg(long)]
        threshold_ratio: Option<f64>,
    },
    /// Metrics for a labeled score CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "report.txt")]
        out: PathBuf,
    },
    /// SVG of labels, domain scores and final score.
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "scores.svg")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { kind, seed, out, train_length, test_length } => {
            let files = catch_cli::cmd_generate(&GenerateArgs { kind, seed, out_dir: out, train_length, test_length })?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Train { config, data, out, epochs, seed } => {
            let s = catch_cli::cmd_train(&TrainArgs { config, data_dir: data, out, epochs, seed })?;
            let last = s.final_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}"));
            println!("{} steps, final loss {last}", s.steps);
            println!("wrote {} and {}", s.checkpoint.display(), s.losses.display());
        }
        Command::Score { checkpoint, data, out, config, score_lambda, inference_patch_size, score_mode, threshold_ratio } => {
            let args = ScoreArgs { checkpoint, data, out, config, score_lambda, inference_patch_size, score_mode, threshold_ratio };
            let s = catch_cli::cmd_score(&args)?;
            println!("scored {} points, wrote {}", s.len(), args.out.display());
        }
        Command::Eval { scores, out } => {
            let report = catch_cli::cmd_eval(&scores, &out)?;
            print!("{}", report.to_key_values());
        }
        Command::Plot { scores, out } => {
            catch_cli::cmd_plot(&scores, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
