//! `hybrid`: prepare data, train, evaluate and explain the hybrid headline
//! classifier.

mod artifacts;
mod config;
mod error;
mod explain;
mod prepare;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_core::error::Error;
use hybrid_core::explain::Format;

use config::{env_layer, file_layer, resolve, RunConfig};
use error::{CliError, Staged};

#[derive(Parser)]
#[command(name = "hybrid", version, about = "Hybrid BERT-CNN-BiLSTM headline classifier")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Each flag maps to a configuration key;
/// `--set key=value` reaches the rest.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat JSON file of settings
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input CSV
    #[arg(long, global = true)]
    data: Option<String>,
    /// aspect or polarity
    #[arg(long, global = true)]
    task: Option<String>,
    /// 1 (resample then split), 2 (split then resample train) or none
    #[arg(long, global = true)]
    technique: Option<String>,
    /// none, under or over
    #[arg(long, global = true)]
    resample: Option<String>,
    /// train/val/test, e.g. 80/10/10
    #[arg(long, global = true)]
    ratios: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Root for run directories
    #[arg(long, global = true)]
    out: Option<String>,
    /// Parallel k-fold workers
    #[arg(long, global = true)]
    jobs: Option<String>,
    /// Prepared corpus directory (default <out>/prepared)
    #[arg(long, global = true)]
    prepared: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    #[arg(long, global = true)]
    max_len: Option<String>,
    #[arg(long, global = true)]
    k: Option<String>,
    /// Any other setting, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary, encoded cache and manifest from a CSV
    Prepare,
    /// Split (and resample) the prepared corpus and audit the result
    Resample,
    /// Train one model on a split and report train/val/test metrics
    Train,
    /// Re-evaluate a checkpoint on the split it was trained with
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// k-fold cross-validation with an average row
    Kfold,
    /// Word-level explanation of one headline
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// Class to explain (default: the predicted class)
        #[arg(long)]
        class: Option<String>,
        /// Words shown in the printed table
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value = "html")]
        format: String,
    },
    /// Show a checkpoint, a prepared directory, or the resolved settings
    Inspect { path: Option<PathBuf> },
}

impl Common {
    fn cli_layer(&self) -> Result<Vec<(String, String)>, CliError> {
        let flags = [
            ("data", &self.data),
            ("task", &self.task),
            ("technique", &self.technique),
            ("resample", &self.resample),
            ("ratios", &self.ratios),
            ("seed", &self.seed),
            ("out", &self.out),
            ("jobs", &self.jobs),
            ("prepared", &self.prepared),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("max_len", &self.max_len),
            ("k", &self.k),
        ];
        let mut layer: Vec<(String, String)> =
            flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            layer.push((k.trim().to_string(), v.to_string()));
        }
        Ok(layer)
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e)).stage("config")?;
            layers.push(file_layer(&text, path).stage("config")?);
        }
        layers.push(env_layer(|k| std::env::var(k).ok()));
        layers.push(self.cli_layer()?);
        resolve(&layers).stage("config")
    }
}

fn format(s: &str) -> Result<Format, CliError> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.common.resolve()?;
    match cli.command {
        Command::Prepare => prepare::run(&cfg).map(drop),
        Command::Resample => run::resample(cfg).map(drop),
        Command::Train => run::train(cfg).map(drop),
        Command::Eval { checkpoint, split, format: f } => {
            run::eval(&checkpoint, cli.common.prepared.map(PathBuf::from), &split, format(&f)?).map(drop)
        }
        Command::Kfold => run::kfold(cfg).map(drop),
        Command::Explain { checkpoint, text, class, top, format: f } => {
            let req = explain::ExplainRequest { checkpoint: &checkpoint, text: &text, class: class.as_deref(), top, format: format(&f)? };
            explain::explain(&cfg, &req).map(drop)
        }
        Command::Inspect { path } => explain::inspect(&cfg, path.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let ok = matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion);
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
