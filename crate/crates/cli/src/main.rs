//! `tkm`: train, adapt and evaluate tensor kernel machines from the shell.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use tkm::TkmError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] TkmError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(TkmError::from(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(TkmError::Numerical(_) | TkmError::Generation(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "tkm",
    version,
    about = "Tensor kernel machines with CP-decomposed weights"
)]
pub struct Cli {
    /// key = value file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic mixture dataset.
    SynthGen(SynthGenArgs),
    /// Relative kernel-approximation error over an (M, U) grid.
    KernelGrid(KernelGridArgs),
    /// Train a class-weighted TKRR model.
    Train(TrainArgs),
    /// Adapt a source model to target data.
    Adapt(AdaptArgs),
    /// Score a dataset with a model.
    Predict(PredictArgs),
    /// Segment- or event-level metrics for scores or predicted events.
    Evaluate(EvaluateArgs),
    /// Run the synthetic source/target transfer study.
    ExperimentSynth(ExperimentArgs),
    /// Compare the CP solver with the dense primal and dual references.
    OracleCheck(OracleArgs),
}

/// `M,U,SIGMA`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatmapArg {
    pub m: usize,
    pub u: f64,
    pub sigma: f64,
}

impl FromStr for FeatmapArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [m, u, sigma] = parts.as_slice() else {
            return Err(format!("expected M,U,SIGMA, got {s:?}"));
        };
        Ok(FeatmapArg {
            m: m.parse().map_err(|_| format!("bad M in {s:?}"))?,
            u: u.parse().map_err(|_| format!("bad U in {s:?}"))?,
            sigma: sigma.parse().map_err(|_| format!("bad SIGMA in {s:?}"))?,
        })
    }
}

/// Comma-separated values; integers also accept an inclusive `a..b` range.
#[derive(Debug, Clone, PartialEq)]
pub struct ListArg<T>(pub Vec<T>);

impl FromStr for ListArg<f64> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bad number {v:?}"))
            })
            .collect::<Result<_, _>>()
            .map(ListArg)
    }
}

fn int_list<T>(s: &str) -> Result<ListArg<T>, String>
where
    T: FromStr + Copy + PartialOrd + TryFrom<u64>,
    u64: From<T>,
{
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim) {
        if let Some((a, b)) = item.split_once("..") {
            let a: T = a
                .trim()
                .parse()
                .map_err(|_| format!("bad range {item:?}"))?;
            let b: T = b
                .trim()
                .parse()
                .map_err(|_| format!("bad range {item:?}"))?;
            if a > b {
                return Err(format!("empty range {item:?}"));
            }
            for v in u64::from(a)..=u64::from(b) {
                out.push(T::try_from(v).map_err(|_| format!("range {item:?} overflows"))?);
            }
        } else {
            out.push(item.parse().map_err(|_| format!("bad integer {item:?}"))?);
        }
    }
    Ok(ListArg(out))
}

impl FromStr for ListArg<u64> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        int_list(s)
    }
}

impl FromStr for ListArg<u32> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        int_list(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Source,
    Target,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Preset as clap::ValueEnum>::from_str(s, true).map_err(|_| format!("unknown preset {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InitArg {
    Random,
    Source,
}

impl FromStr for InitArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <InitArg as clap::ValueEnum>::from_str(s, true).map_err(|_| format!("unknown init {s:?}"))
    }
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_pos: Option<usize>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct KernelGridArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// e.g. `10..20` or `10,12,14`.
    #[arg(long)]
    pub m_grid: Option<ListArg<u32>>,
    /// e.g. `1,1.25,1.5`.
    #[arg(long)]
    pub u_grid: Option<ListArg<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ThresholdArgs {
    #[arg(long, conflicts_with = "target_sensitivity")]
    pub threshold: Option<f64>,
    /// Pick the largest threshold reaching this sensitivity on the tuning data.
    #[arg(long)]
    pub target_sensitivity: Option<f64>,
    /// Data for threshold tuning; the training data when omitted.
    #[arg(long)]
    pub tune_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub featmap: Option<FeatmapArg>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Stop once the relative objective change falls below this.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Fit per-feature min-max scaling to [-1, 1] and store it in the model.
    #[arg(long)]
    pub scale: bool,
    #[arg(long)]
    pub no_class_weights: bool,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    /// Loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Source model JSON.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Must match the source model's map when given.
    #[arg(long)]
    pub featmap: Option<FeatmapArg>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub no_class_weights: bool,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides the model's threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// `score[,label]` CSV from `predict`.
    #[arg(long, conflicts_with = "pred_events")]
    pub scores: Option<PathBuf>,
    /// Predicted events as `start_s,end_s` CSV.
    #[arg(long)]
    pub pred_events: Option<PathBuf>,
    /// Dataset with the true labels (and segment timing for event scoring).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// True events; derived from labelled runs in `--data` when omitted.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Recording length in seconds; taken from the timing when omitted.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Applied to scores when the scores file carries no labels.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Post-processing: an event fires when `k` of `n` consecutive segments are positive.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// e.g. `0..9`.
    #[arg(long)]
    pub seeds: Option<ListArg<u64>>,
    #[arg(long)]
    pub mu_grid: Option<ListArg<f64>>,
    #[arg(long)]
    pub featmap: Option<FeatmapArg>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Lattice points per axis.
    #[arg(long)]
    pub lattice: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub featmap: Option<FeatmapArg>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("TKM_LOG", "error");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
