use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "gpevidence", version, about = "Gaussian-process model selection with stabilized Laplace evidence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Fit one kernel and report every criterion.
    Evaluate(EvaluateArgs),
    /// Reference evidence by quadrature and/or nested sampling.
    Oracle(OracleArgs),
    /// Greedy compositional kernel search.
    Search(SearchArgs),
    /// Sample a benchmark dataset from a GP prior.
    Generate(GenerateArgs),
    /// 2σ Laplace ellipses for a two-hyperparameter model.
    Ellipse(EllipseArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Evaluate(_) => "evaluate",
            Command::Oracle(_) => "oracle",
            Command::Search(_) => "search",
            Command::Generate(_) => "generate",
            Command::Ellipse(_) => "ellipse",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// CSV path with x,y columns, or the alias `linear-benchmark`.
    #[arg(long)]
    pub data: String,

    /// Standardize y to zero mean and unit variance (default for CSV files).
    #[arg(long, overrides_with = "no_normalize")]
    pub normalize: bool,

    /// Keep y on its original scale (default for built-in aliases).
    #[arg(long, overrides_with = "normalize")]
    pub no_normalize: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Random restarts on top of the start at the prior means.
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct NestedArgs {
    #[arg(long, default_value_t = 500)]
    pub live_points: usize,

    #[arg(long, default_value_t = 0.01)]
    pub dlogz: f64,

    /// Random-walk steps per live-point replacement.
    #[arg(long, default_value_t = 25)]
    pub walk_steps: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Kernel expression, e.g. `SE+LIN*MAT32` or `K1+K2`.
    #[arg(long)]
    pub kernel: String,

    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Quadrature,
    Nested,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub kernel: String,

    #[arg(long, value_enum, default_value_t = Method::Both)]
    pub method: Method,

    #[command(flatten)]
    pub nested: NestedArgs,

    /// Grid points per hyperparameter (default 401 for up to two, 101 for three).
    #[arg(long)]
    pub points_per_dim: Option<usize>,

    /// Half-width of the quadrature box in prior standard deviations.
    #[arg(long, default_value_t = 6.0)]
    pub half_width: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Write nested-sampling posterior samples to this CSV.
    #[arg(long)]
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// One search per listed criterion.
    #[arg(long, value_delimiter = ',', default_value = "LapS")]
    pub criterion: Vec<String>,

    #[arg(long, default_value_t = 3)]
    pub depth: usize,

    #[arg(long, value_delimiter = ',', default_value = "SE,LIN,MAT32")]
    pub bases: Vec<String>,

    #[command(flatten)]
    pub fit: FitArgs,

    /// Kernel that generated the data, for the recognition column.
    #[arg(long)]
    pub generating: Option<String>,

    /// Add the quadrature log evidence of each winner with at most three hyperparameters.
    #[arg(long)]
    pub score_evidence: bool,

    /// Also write the summary rows as CSV here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// LIN, SE, MAT32 or SE+SE.
    #[arg(long)]
    pub generator: String,

    /// Number of points (presets: 5, 10, 20, 30, 40, 50, 100, 200).
    #[arg(long, default_value_t = 20)]
    pub n: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = -2.5, allow_hyphen_values = true)]
    pub x_min: f64,

    #[arg(long, default_value_t = 2.5, allow_hyphen_values = true)]
    pub x_max: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EllipseArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub kernel: String,

    /// Ellipse radius in standard deviations.
    #[arg(long, default_value_t = 2.0)]
    pub level: f64,

    /// Run nested sampling and report the share of samples inside each ellipse.
    #[arg(long)]
    pub nested_samples: bool,

    #[command(flatten)]
    pub nested: NestedArgs,

    #[command(flatten)]
    pub fit: FitArgs,

    /// Write the nested-sampling samples to this CSV.
    #[arg(long)]
    pub samples: Option<PathBuf>,
}
