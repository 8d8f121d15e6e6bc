//! Argument parsing and dispatch. Exit codes: 0 success, 2 usage or
//! configuration error, 1 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "voxelfm", version, about = "Contrastive pre-training and embedding analytics for CT-like volumes")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom corpus (volumes and masks).
    PhantomGen {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pre-train an encoder; writes checkpoints and loss_curve.csv.
    Pretrain(DataArgs),
    /// Strategy/variant/crop-count ablation table.
    Ablate(DataArgs),
    /// Linear-probe Dice for one or more checkpoints and pick the best.
    Probe {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sliding-window embeddings into an embedding store.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        /// One aggregated record per volume instead of one per window.
        #[arg(long)]
        aggregate: bool,
        /// CSV of `id,label` for aggregated records.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Semantic search from a box in a source volume.
    Search {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        source: String,
        #[arg(long, value_parser = parse_triple)]
        center: [usize; 3],
        #[arg(long = "box", value_parser = parse_triple)]
        box_size: Option<[usize; 3]>,
        #[arg(long, value_parser = parse_triple)]
        stride: Option<[usize; 3]>,
        /// Comma-separated target ids; all volumes when omitted.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
    },
    /// Leave-one-out retrieval metrics over a labelled store.
    RetrieveEval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Occlusion saliency of one volume.
    Saliency {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        volume: String,
        #[arg(long, value_parser = parse_triple)]
        occ: Option<[usize; 3]>,
        #[arg(long, value_parser = parse_triple)]
        stride: Option<[usize; 3]>,
        #[arg(long, allow_negative_numbers = true)]
        fill: Option<f32>,
    },
    /// Shared PCA colour maps for several volumes.
    PcaMap {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        volumes: Vec<String>,
    },
    /// Test-retest agreement of two aligned volumes.
    Stability {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
    /// Organ centroid distance over every ordered pair of labelled volumes.
    Ocd {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        label: i32,
        #[arg(long = "box", value_parser = parse_triple)]
        box_size: Option<[usize; 3]>,
        #[arg(long, value_parser = parse_triple)]
        stride: Option<[usize; 3]>,
    },
    /// HTTP service for the explorer.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        assets: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Volume directory; a corpus is generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

/// `z,y,x`, or a single value for all three axes.
pub fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [v] => Ok([v; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected 1 or 3 comma-separated values, got {s:?}")),
    }
}

/// Bad invocation or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub config_given: bool,
}

fn load_context(cli: &Cli) -> anyhow::Result<Context> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    Ok(Context {
        seed: cli.seed.unwrap_or(config.training.seed),
        config,
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from("voxelfm-out")),
        config_given: cli.config.is_some(),
    })
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let result = load_context(&cli).and_then(|ctx| commands::dispatch(&ctx, &cli.command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
