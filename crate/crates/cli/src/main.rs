//! `npi`: generate, window, train, perturb and compare.

mod commands;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand};
use npi_core::Error;

#[derive(Parser, Debug)]
#[command(name = "npi", version, about = "Neural perturbational inference workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key = value file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where to write the run manifest (defaults next to the output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a structural connectome as CSV.
    GenSc(GenScArgs),
    /// Integrate the coupled Jansen-Rit network.
    Simulate(SimulateArgs),
    /// Cut a series into context/target windows and split it.
    MakeDataset(MakeDatasetArgs),
    /// Fit a forecaster.
    Train(TrainArgs),
    /// Twin-simulation ground-truth connectivity.
    GroundTruthEc(GroundTruthArgs),
    /// Perturb a trained forecaster.
    Perturb(PerturbArgs),
    /// Conditional Granger causality with BIC lag selection.
    Granger(GrangerArgs),
    /// Compare an EC estimate to ground truth.
    Evaluate(EvaluateArgs),
    /// Render an EC slice or matrix as SVG and/or CSV.
    ExportPlot(ExportPlotArgs),
    /// Full benchmark: models x hidden sizes against ground truth.
    Pipeline(PipelineArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["three_node", "random", "load"])))]
pub struct GenScArgs {
    /// 0 drives 1 and 2.
    #[arg(long)]
    pub three_node: bool,
    /// Random directed graph.
    #[arg(long, num_args = 3, value_names = ["N", "DENSITY", "SEED"])]
    pub random: Option<Vec<String>>,
    /// Validate and normalize an existing CSV.
    #[arg(long)]
    pub load: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub sc: PathBuf,
    /// Integration steps before downsampling.
    #[arg(long)]
    pub steps: Option<usize>,
    /// `region:step:delta[:variable]`, step counted in output samples from 1.
    #[arg(long)]
    pub perturb: Vec<String>,
    /// Model constant override `key=value`, e.g. `C=135`.
    #[arg(long)]
    pub param: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the series as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub ts: PathBuf,
    /// `context:horizon:stride`.
    #[arg(long)]
    pub spec: Option<String>,
    /// Fraction of windows used for training.
    #[arg(long)]
    pub split: Option<f64>,
    /// Standardize channels with training statistics.
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// cnn, rnn, lstm, gru or transformer.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs without a new best validation loss before stopping.
    #[arg(long)]
    pub early_stop: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV (defaults to `<out>.train.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GroundTruthArgs {
    #[arg(long)]
    pub sc: PathBuf,
    /// Twin windows averaged.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Kick added to x1 of the source region (mV).
    #[arg(long)]
    pub delta: Option<f64>,
    /// One-based window step receiving the kick.
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub param: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the clean/perturbed contexts for `perturb`.
    #[arg(long)]
    pub pairs_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// generative or direct.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Impulse size in direct mode.
    #[arg(long)]
    pub delta: Option<f64>,
    /// One-based context step of the direct impulse.
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GrangerArgs {
    #[arg(long)]
    pub ts: PathBuf,
    #[arg(long)]
    pub maxlag: Option<usize>,
    /// Fixed lag order instead of BIC selection.
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Row label (defaults to the estimate's mode).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Checkpoint whose validation error goes in the report.
    #[arg(long, requires = "data")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("format").required(true).multiple(true).args(["svg", "csv"])))]
pub struct ExportPlotArgs {
    /// NPIEC tensor or matrix CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// One-based horizon step; omitted means the peak-magnitude summary.
    #[arg(long)]
    pub tstep: Option<usize>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub title: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// three-node or random.
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    /// Training series length in output samples.
    #[arg(long)]
    pub points: Option<usize>,
    /// Comma-separated model kinds.
    #[arg(long)]
    pub models: Option<String>,
    /// Comma-separated hidden sizes.
    #[arg(long = "hidden-sizes")]
    pub hidden_sizes: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub maxlag: Option<usize>,
    /// Desk-scale profile: 90,000 points, 10 regions for random graphs.
    #[arg(long)]
    pub desk: bool,
    /// Parallel training jobs.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long = "from")]
    pub from: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Invalid(_) => 3,
                Error::Io { .. } => 4,
                Error::Format { .. } => 5,
                Error::Shape { .. } => 6,
                Error::Divergence { .. } | Error::NonFinite(_) => 7,
                Error::Singular(_) | Error::ZeroVariance(_) => 8,
                Error::Graph(_) => 9,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.code() {
            2 => "usage",
            3 => "invalid-value",
            4 => "io",
            5 => "bad-format",
            6 => "shape-mismatch",
            7 => "numerical",
            8 => "degenerate-data",
            _ => "internal",
        }
    }

    /// `npi: error kind=<kind> code=<n>: <message>` on one line.
    pub fn line(&self) -> String {
        let msg = match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        };
        let msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("npi: error kind={} code={}: {msg}", self.kind(), self.code())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses and runs one invocation; `args` excludes the program name.
pub fn run(args: &[String]) -> CliResult<()> {
    let argv = std::iter::once("npi".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let head: Vec<&str> = text.lines().take_while(|l| !l.trim().is_empty()).collect();
            return Err(CliError::Usage(head.join(" ").trim_start_matches("error: ").to_string()));
        }
    };
    let c = &cli.common;
    match &cli.command {
        Command::GenSc(a) => commands::gen_sc(c, a, args),
        Command::Simulate(a) => commands::simulate(c, a, args),
        Command::MakeDataset(a) => commands::make_dataset(c, a, args),
        Command::Train(a) => commands::train(c, a, args),
        Command::GroundTruthEc(a) => commands::ground_truth(c, a, args),
        Command::Perturb(a) => commands::perturb(c, a, args),
        Command::Granger(a) => commands::granger(c, a, args),
        Command::Evaluate(a) => commands::evaluate(c, a, args),
        Command::ExportPlot(a) => commands::export_plot(c, a, args),
        Command::Pipeline(a) => pipeline::run(c, a, args),
        Command::Replay(a) => {
            let m = manifest::load(&a.from)?;
            if m.command == "replay" {
                return Err(CliError::Usage("a replay manifest cannot be replayed".into()));
            }
            run(&m.args)
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
