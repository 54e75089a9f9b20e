use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use hybridnet::config::RunConfig;
use hybridnet::experiment::{run, RunError};

/// Hybrid data/model parallel CNN training on simulated workers.
///
/// Settings come from the optional config file (`key = value` lines) and are
/// then overridden by any flags given.
#[derive(Debug, Parser)]
#[command(name = "hybridnet", version)]
struct Cli {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total worker count N
    #[arg(long)]
    workers: Option<String>,
    /// MP group size K
    #[arg(long)]
    mp: Option<String>,
    /// Local batch size B per worker
    #[arg(long)]
    batch: Option<String>,
    /// Parameter averaging period in train steps
    #[arg(long)]
    avg_period: Option<String>,
    /// Split a LINEAR layer only when its CCR exceeds this
    #[arg(long)]
    ccr_threshold: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Exact number of train steps, overriding --epochs
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// synthetic[:n=..,classes=..,dims=CxHxW] or cifar10:PATH
    #[arg(long)]
    dataset: Option<String>,
    /// train, oracle-check, plan-only or volume-sweep
    #[arg(long)]
    mode: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
    /// f32 or f64
    #[arg(long)]
    scalar: Option<String>,
    /// vgg, toy or file:PATH
    #[arg(long)]
    net: Option<String>,
    /// true or false
    #[arg(long)]
    dropout: Option<String>,
    /// Record wall-clock images/sec (true or false)
    #[arg(long)]
    timing: Option<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        [
            ("workers", &self.workers),
            ("mp", &self.mp),
            ("batch", &self.batch),
            ("avg_period", &self.avg_period),
            ("ccr_threshold", &self.ccr_threshold),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("steps", &self.steps),
            ("seed", &self.seed),
            ("dataset", &self.dataset),
            ("mode", &self.mode),
            ("out", &self.out),
            ("scalar", &self.scalar),
            ("net", &self.net),
            ("dropout", &self.dropout),
            ("timing", &self.timing),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

fn config(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in cli.overrides() {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match config(&cli).and_then(|cfg| run(&cfg)) {
        Ok(summary) => {
            print!("{}", summary.text);
            for a in summary.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
