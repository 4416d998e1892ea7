use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sharpscape_core::nn::Arch;
use sharpscape_core::optim::OptimKind;
use sharpscape_core::study::{GroupKey, DEFAULT_EVAL_SAMPLES};

#[derive(Parser, Debug)]
#[command(name = "sharpscape", version, about = "Loss landscapes and epsilon-sharpness for small audio CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic device-shift dataset and export it.
    GenData(GenDataArgs),
    /// Train one model and save its best-epoch checkpoint.
    Train(TrainArgs),
    /// Scan a 2D loss surface around a checkpoint.
    Scan(ScanArgs),
    /// Epsilon-sharpness from fresh scans or from a saved surface.
    Sharpness(SharpnessArgs),
    /// Run (or resume) a hyperparameter grid study.
    Study(StudyArgs),
    /// Summarise a study directory: correlations and grouped means.
    Report(ReportArgs),
    /// Render a surface or study as SVG.
    Plot(PlotArgs),
    /// Log-mel features of a 16-bit PCM WAV file.
    Features(FeaturesArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Exported dataset directory; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "mini10")]
    pub arch: Arch,
    #[arg(long, visible_alias = "optimizer", default_value = "adam")]
    pub optimiser: OptimKind,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct ScanCommon {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Direction seed (the base seed for repeats).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Samples of the split used for the loss; 0 uses all.
    #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Make eta orthogonal to delta within each filter.
    #[arg(long)]
    pub orthogonalize: bool,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[command(flatten)]
    pub common: ScanCommon,
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 41)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SharpnessArgs {
    #[command(flatten)]
    pub common: ScanCommon,
    /// Saved surface CSV; skips scanning.
    #[arg(long, conflicts_with = "checkpoint")]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0.25)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.25)]
    pub radius: f64,
    #[arg(long, default_value_t = 11)]
    pub points: usize,
    /// Maximise over the whole square instead of the ball.
    #[arg(long)]
    pub square: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values = ["mini10", "mini14"])]
    pub arch: Vec<Arch>,
    #[arg(long, visible_alias = "optimizer", value_delimiter = ',', default_values = ["sgd", "adam"])]
    pub optimiser: Vec<OptimKind>,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 1e-4, 1e-5])]
    pub lr: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32])]
    pub batch_size: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [42u64, 43])]
    pub seed: Vec<u64>,
    /// Skip matching points, e.g. `optimiser=sgd,lr=1e-4`. Repeatable.
    #[arg(long)]
    pub exclude: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0.25)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.25)]
    pub radius: f64,
    #[arg(long, default_value_t = 11)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub direction_seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub square: bool,
    #[arg(long)]
    pub orthogonalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Study directory.
    pub study: PathBuf,
    /// Where to write `summary.csv` and `report.json`; defaults to the study.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    SurfaceHeatmap,
    SurfaceContour,
    Scatter,
    GroupedBars,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BarMetric {
    Sharpness,
    Accuracy,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Surface CSV or study directory.
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Option<PlotKind>,
    #[arg(long, default_value_t = 10)]
    pub levels: usize,
    #[arg(long, default_value = "optimiser")]
    pub group_by: GroupKey,
    #[arg(long, value_enum, default_value = "sharpness")]
    pub metric: BarMetric,
    /// Output SVG path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    pub wav: PathBuf,
    /// Output CSV, one row per mel bin.
    #[arg(long)]
    pub out: PathBuf,
}
