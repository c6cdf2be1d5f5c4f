use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bayesian Poisson-lognormal matrix factor model for population × year × age
/// count panels.
#[derive(Debug, Parser)]
#[command(name = "bpmf", version, propagate_version = true)]
pub struct Cli {
    /// Master random seed; overrides any seed in configuration files [default: 1]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 = one per core). Output bytes do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only log errors
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic panel and its ground truth from the model
    Simulate(SimulateArgs),
    /// Run the Gibbs sampler on a count panel
    Fit(FitArgs),
    /// Simulate future counts from a fitted model
    Forecast(ForecastArgs),
    /// Ten-fold cell-wise cross-validation over a (Q, R) grid
    Cv(CvArgs),
    /// Rolling-origin forecast evaluation of the model and the benchmarks
    Benchmark(BenchmarkArgs),
    /// HOSVD factors of the fitted surfaces, parameter counts and recovery summaries
    Postprocess(PostprocessArgs),
    /// Merge evaluation reports into a forecast-performance table
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// N=50, T=30, A=40, Q=R=3, O=10
    Paper,
    /// N=10, T=15, A=20, otherwise as `paper`
    Reduced,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// key=value simulation settings (n, t, a, q, r, tau_t, tau_a, kappa, sigma2_shape, sigma2_scale, offset, ...)
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Starting settings before the config file is applied
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,

    /// Output directory (panel.csv, truth/, sim_config.txt)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Long-format CSV with population, year, age, count and optional offset columns
    #[arg(long)]
    pub data: PathBuf,

    /// Columns joined (with `/`) into the population key
    #[arg(long, value_delimiter = ',', default_value = "population")]
    pub group_columns: Vec<String>,

    /// Name of the offset column (default: `offset` when present)
    #[arg(long)]
    pub offset_column: Option<String>,

    /// Offset O used for every cell when the data has no offset column
    #[arg(long, default_value_t = 1.0)]
    pub default_offset: f64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// key=value prior settings (q, r, c0, C0, L0, drift_prior, ...)
    #[arg(long)]
    pub prior: Option<PathBuf>,

    /// key=value sampler settings (n_iterations, n_burnin, thin, update_order, ...)
    #[arg(long)]
    pub sampler: Option<PathBuf>,

    /// Retained-phase iterations after burn-in [default: 25000]
    #[arg(long)]
    pub draws: Option<usize>,

    /// Burn-in iterations [default: 7500]
    #[arg(long)]
    pub burnin: Option<usize>,

    /// Keep every k-th post-burn-in iteration [default: 10]
    #[arg(long)]
    pub thin: Option<usize>,

    /// Inverse-gamma shape of the noise variance prior [default: 2.5]
    #[arg(long)]
    pub c0: Option<f64>,

    /// Inverse-gamma scale of the noise variance prior [default: 1.5]
    #[arg(long = "C0")]
    pub big_c0: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Number of time factors Q [default: prior file value, else 6]
    #[arg(long)]
    pub q: Option<usize>,

    /// Number of age factors R [default: prior file value, else 8]
    #[arg(long)]
    pub r: Option<usize>,

    /// Output directory for the posterior draws
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Directory written by `fit`
    #[arg(long)]
    pub fit_dir: PathBuf,

    /// Forecast horizon in years
    #[arg(long, default_value_t = 5)]
    pub horizon: usize,

    /// Predictive replicates per retained draw
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,

    /// Leave out the idiosyncratic noise of future latent surfaces
    #[arg(long)]
    pub no_idiosyncratic: bool,

    /// Output directory [default: <fit-dir>/forecast]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Time-factor counts, as `lo..hi` (inclusive) or a comma list
    #[arg(long, default_value = "1..10")]
    pub q_range: String,

    /// Age-factor counts, as `lo..hi` (inclusive) or a comma list
    #[arg(long, default_value = "1..10")]
    pub r_range: String,

    /// Number of folds
    #[arg(long, default_value_t = 10)]
    pub folds: usize,

    /// Run only the first k folds
    #[arg(long)]
    pub max_folds: Option<usize>,

    /// Output directory (cv_grid.csv, cv_summary.csv, cv_choice.txt)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Models, comma separated: rw, rw_drift, time_fact_sep:K, time_fact_joint:K,
    /// age_fact_sep:K, age_fact_joint:K, bmf:Q:R. Factor counts accept `lo..hi`.
    #[arg(long, default_value = "rw")]
    pub spec: String,

    /// Rolling windows as `train_len[,long_horizon]`; one-step forecasts come
    /// from every window and the long horizon from the first only
    #[arg(long, default_value = "17,5")]
    pub windows: String,

    /// Predictive replicates per retained draw for `bmf` models
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,

    /// Output directory (forecast_eval.csv, forecast_summary.csv, table.csv, table.txt)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// Directory written by `fit`
    #[arg(long)]
    pub fit_dir: PathBuf,

    /// Time components to extract [default: fitted Q]
    #[arg(long)]
    pub q: Option<usize>,

    /// Age components to extract [default: fitted R]
    #[arg(long)]
    pub r: Option<usize>,

    /// Ground-truth directory written by `simulate` (enables recovery.csv)
    #[arg(long)]
    pub truth: Option<PathBuf>,

    /// Output directory [default: <fit-dir>/postprocess]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation reports (forecast_eval.csv or cv_grid.csv files)
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,

    /// Output directory for table.csv and table.txt (the table is always printed)
    #[arg(long)]
    pub out: Option<PathBuf>,
}
