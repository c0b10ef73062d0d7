//! The `ohgc` command line: synthesize scenes, train the discriminators,
//! group candidates, evaluate results and time the pipeline.

pub mod commands;
pub mod config;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ohgc", version, about = "Group keypoint candidates into people")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-scene parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the graph topology.
    #[arg(long, global = true, value_enum)]
    pub topology: Option<TopologyArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TopologyArg {
    Tree,
    Bypass,
    Extended,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grouper {
    Ohgc,
    Greedy,
    Oracle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and their COCO ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// COCO ground-truth file; defaults to `<out>.gt.json`.
        #[arg(long)]
        gt_out: Option<PathBuf>,
    },
    /// Train the discriminators on labeled scenes.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// JSON-lines metrics; defaults to `<checkpoint_out>.metrics.jsonl`.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Group every scene and write COCO-style results.
    Group {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Grouper::Ohgc)]
        grouper: Grouper,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-iteration clustering trace as JSON lines.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Evaluate a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Scene dataset or COCO keypoint file.
        #[arg(long)]
        gt: PathBuf,
        /// JSON report; defaults to `<results>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage timings of the grouping pipeline.
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// Trained parameters; a freshly initialized network otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also measure how the clustering loop scales with candidate count.
        #[arg(long)]
        scaling: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string().trim().to_string()));
        }
    };
    let cfg = commands::resolve_config(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| commands::dispatch(&cfg, cli.command))
}
