//! `alcnn` — the pipeline driver: synthesize or ingest city data, extract
//! features, mine demand patterns, train a predictor, infer patterns in a
//! city without ride data, score the result, and plot artifacts.
//!
//! Exit codes: 0 success, 1 command-line usage error, 2 bad or missing
//! input data, 3 numeric failure. Output files are written atomically, so
//! a failed run leaves no partially written artifact.

use std::path::PathBuf;
use std::process::ExitCode;

use alcnn_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod config;
mod pipeline;
mod svg;

#[derive(Parser)]
#[command(
    name = "alcnn",
    version,
    about = "Infer fine-grained daily bike demand patterns in a city with no ride data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic source/target city pair with known truth
    Synth(SynthArgs),
    /// Aggregate trip records into per-cell daily demand counts
    Ingest(IngestArgs),
    /// Compute per-cell geographic features from a city's source CSVs
    Features(FeaturesArgs),
    /// Mine one stable daily demand pattern per cell from aggregated demand
    Mine(MineArgs),
    /// Fit the joint PCA and train a predictor on the source city
    Train(TrainArgs),
    /// Apply a trained checkpoint to a target city's features
    Infer(InferArgs),
    /// Score predicted pattern maps against a reference map
    Eval(EvalArgs),
    /// Render pattern curves, histograms, and score bars as CSV + SVG
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives source/ and target/ subdirectories
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed; the target city and trip sampling derive theirs from it (default 7)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid rows (default 20)
    #[arg(long)]
    pub rows: Option<usize>,
    /// Grid columns (default 20)
    #[arg(long)]
    pub cols: Option<usize>,
    /// Time slots per day (default 48)
    #[arg(long)]
    pub slots: Option<usize>,
    /// Days of trip records to sample (default 28)
    #[arg(long)]
    pub days: Option<usize>,
}

#[derive(Args)]
pub struct IngestArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// City directory holding city.json and trips.csv
    #[arg(long)]
    pub city_dir: Option<PathBuf>,
    /// Trip records CSV (default: trips.csv in the city directory)
    #[arg(long)]
    pub trips: Option<PathBuf>,
    /// Output directory (default: the city directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Time slots per day (default: the city's slot count)
    #[arg(long)]
    pub k: Option<usize>,
    /// Fixed UTC offset in seconds for day splitting (default 0)
    #[arg(long, allow_hyphen_values = true)]
    pub utc_offset: Option<i64>,
}

#[derive(Args)]
pub struct FeaturesArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// City directory holding city.json and the six source CSVs
    #[arg(long)]
    pub city_dir: Option<PathBuf>,
    /// Output directory (default: the city directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// POI category count C (default 17)
    #[arg(long)]
    pub poi_categories: Option<usize>,
    /// Road level count L (default 29)
    #[arg(long)]
    pub road_levels: Option<usize>,
    /// Distance in meters reported when a point set is empty (default 50000)
    #[arg(long)]
    pub sentinel_distance_m: Option<f64>,
}

#[derive(Args)]
pub struct MineArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Demand JSON (default: demand.json in the configured source directory)
    #[arg(long)]
    pub demand: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Acceptance threshold β on per-day KL divergence (default 0.11)
    #[arg(long)]
    pub beta: Option<f64>,
    /// Smoothing ε for normalization (default 1e-6)
    #[arg(long)]
    pub eps: Option<f64>,
    /// Wavelet family: haar, db2, or db4 (default db2)
    #[arg(long)]
    pub wavelet: Option<String>,
    /// Divergence histogram bin count (default 20)
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum Method {
    Alcnn,
    Lr,
    Knn,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source city directory (city.json, features.csv, patterns.json)
    #[arg(long)]
    pub source_dir: Option<PathBuf>,
    /// Target city directory (features.csv; for the joint PCA fit)
    #[arg(long)]
    pub target_dir: Option<PathBuf>,
    /// Output directory for copca.json, checkpoint.json, training_log.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Predictor to train (default alcnn)
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Latent dimension d′ of the joint PCA (default 16)
    #[arg(long)]
    pub d_prime: Option<usize>,
    /// Ridge regularization λ, lr method only (default 0.1)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Neighbor count, knn method only (default 10)
    #[arg(long)]
    pub neighbors: Option<usize>,
    /// Training rng seed (default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Receptive-field sizes, comma-separated odd numbers (default 1,3,5,7,9)
    #[arg(long)]
    pub scales: Option<String>,
    /// Conv filter count (default 32)
    #[arg(long)]
    pub filters: Option<usize>,
    /// Hidden layer width (default 64)
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Adam learning rate (default 0.001)
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Minibatch size (default 128)
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dropout probability (default 0.1)
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Early-stopping patience in epochs (default 50)
    #[arg(long)]
    pub patience: Option<usize>,
    /// Epoch cap (default 2000)
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Validation fraction (default 0.2)
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Wavelet family for the output head or ridge targets (default db2)
    #[arg(long)]
    pub wavelet: Option<String>,
    /// Smoothing ε for prediction normalization (default 1e-6)
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Args)]
pub struct InferArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding checkpoint.json and copca.json (a train run's --out)
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    /// Checkpoint file (default: checkpoint.json in --model-dir)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fitted joint-PCA transform (default: copca.json in --model-dir)
    #[arg(long)]
    pub copca: Option<PathBuf>,
    /// Target city directory (city.json, features.csv)
    #[arg(long)]
    pub target_dir: Option<PathBuf>,
    /// Output directory for patterns.json (and attention.json for alcnn)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference pattern map (the truth)
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Predicted pattern map as name=path (repeatable; bare path uses the file stem)
    #[arg(long = "pred")]
    pub preds: Vec<String>,
    /// Output directory for eval.json and eval_table.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pattern map to draw daily curves from
    #[arg(long)]
    pub patterns: Option<PathBuf>,
    /// Cells to draw, as semicolon-separated "i,j" pairs (default: first 6)
    #[arg(long)]
    pub cells: Option<String>,
    /// Divergence histogram CSV to render
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Evaluation report to render as a score bar chart
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Attention map to render as mean weight per scale
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// Training log to render as loss curves
    #[arg(long)]
    pub training_log: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage_ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match pipeline::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
