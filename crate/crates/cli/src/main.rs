//! `spoofprobe`: ingest datasets, train detector heads on frozen embeddings,
//! evaluate them across datasets, and export ROC and overlap tables.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spoofprobe::synth::BlobSpec;
use spoofprobe::Partition;

use crate::commands::EvalArgs;
use crate::config::Overrides;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "spoofprobe", version, about = "Speech deepfake detection on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a dataset's native layout into a manifest CSV.
    Ingest {
        /// asvspoof19-la, asvspoof21-df, inthewild, timit-tts+ljspeech, fakeorreal or generic-csv
        #[arg(long)]
        kind: String,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset tag written into every row.
        #[arg(long)]
        dataset_tag: Option<String>,
        /// Point rows at `<dir>/<id>.emb` (exported embeddings) instead of audio.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Print the class balance of a manifest.
    Inspect { manifest: PathBuf },
    /// Write a synthetic two-class corpus, its manifest and an example config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_dev: usize,
        #[arg(long, default_value_t = 100)]
        n_eval: usize,
        #[arg(long, default_value_t = 0.5)]
        fake_fraction: f64,
        /// Class separation in standard deviations.
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
    },
    /// Train a head; writes best.spf, train_log.csv and config.resolved.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score manifests with a checkpoint; writes per-dataset scores and reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Defaults to config.resolved.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// train, dev, eval or all.
        #[arg(long, default_value = "eval")]
        partition: String,
        /// Model name used in the report; defaults to the extractor tag.
        #[arg(long)]
        model: Option<String>,
    },
    /// Detection-overlap matrix of two or more score files.
    Compare {
        /// Score file, optionally as name=path.
        #[arg(long = "scores", required = true)]
        scores: Vec<String>,
        #[arg(long, default_value = "eer")]
        threshold_rule: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// ROC curve of a score file as threshold,fpr,tpr CSV.
    Roc {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest {
            kind,
            root,
            out,
            dataset_tag,
            embeddings,
        } => commands::ingest(&kind, &root, &out, dataset_tag, embeddings),
        Command::Inspect { manifest } => commands::inspect(&manifest),
        Command::Synth {
            out,
            seed,
            n_train,
            n_dev,
            n_eval,
            fake_fraction,
            separation,
        } => commands::synth(
            &out,
            &BlobSpec {
                n_train,
                n_dev,
                n_eval,
                fake_fraction,
                separation,
                seed,
                ..BlobSpec::default()
            },
        ),
        Command::Train { config, seed, out } => {
            commands::train(&config, &Overrides { seed, out })
        }
        Command::Eval {
            checkpoint,
            manifests,
            config,
            out,
            partition,
            model,
        } => {
            let partition = match partition.as_str() {
                "all" => None,
                p => Some(p.parse::<Partition>().map_err(|e| CliError::Usage(e.to_string()))?),
            };
            commands::eval(&EvalArgs {
                checkpoint,
                manifests,
                config,
                out,
                partition,
                model,
            })
        }
        Command::Compare {
            scores,
            threshold_rule,
            out,
            dataset,
        } => commands::compare(&scores, &threshold_rule, &out, dataset.as_deref()),
        Command::Roc {
            scores,
            out,
            dataset,
        } => commands::roc(&scores, &out, dataset.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
