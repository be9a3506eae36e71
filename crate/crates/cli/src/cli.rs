use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gradeline_core::classifiers::Metric;
use gradeline_core::evaluation::Interpolation;
use gradeline_core::features::Variant;

/// Two-layer fruit ripeness grading.
///
/// Settings come from built-in defaults, then the JSON file named by
/// --config (or GRADELINE_CONFIG), then command-line flags. GRADELINE_LOG
/// sets the log level (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "gradeline", version)]
pub struct Cli {
    /// JSON settings file.
    #[arg(long, global = true, env = "GRADELINE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render labelled synthetic fruit images and a manifest.
    Generate(GenerateArgs),
    /// Render, augment and tag a full training corpus.
    Corpus(CorpusArgs),
    /// Add rotated, flipped and shifted copies to a manifest.
    Augment(AugmentArgs),
    /// Train a first-layer classifier and report held-out metrics.
    Train(TrainArgs),
    /// Evaluate a model, a confusion matrix or detection output.
    Eval(EvalArgs),
    /// Grade one image (exit 0 for Market, 2 for Defective).
    Grade(GradeArgs),
    /// Run the defect detection service.
    ServeCloud(ServeCloudArgs),
    /// Run the line-side grading service and its HTTP interface.
    ServeEdge(ServeEdgeArgs),
    /// Run the conveyor simulator against an edge service.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory for images, manifest.jsonl and truth.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Rendered originals per class [default: 50].
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Rotated copies [default: 250].
    #[arg(long)]
    pub rotation: Option<usize>,
    /// Flipped copies [default: 250].
    #[arg(long)]
    pub flipping: Option<usize>,
    /// Shifted copies [default: 250].
    #[arg(long)]
    pub shifting: Option<usize>,
    /// Extra rendered ripened images [default: 100].
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the new images and the combined manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rotation: Option<usize>,
    #[arg(long)]
    pub flipping: Option<usize>,
    #[arg(long)]
    pub shifting: Option<usize>,
    /// Largest rotation in degrees.
    #[arg(long)]
    pub max_angle: Option<f64>,
    /// Largest shift as a fraction of the image size.
    #[arg(long)]
    pub max_shift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Knn,
    Nb,
    Rf,
    Svm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Manhattan,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Manhattan => Metric::Manhattan,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InterpolationArg {
    Stepwise,
    AllPoint,
    ElevenPoint,
}

impl From<InterpolationArg> for Interpolation {
    fn from(i: InterpolationArg) -> Self {
        match i {
            InterpolationArg::Stepwise => Interpolation::Stepwise,
            InterpolationArg::AllPoint => Interpolation::AllPoint,
            InterpolationArg::ElevenPoint => Interpolation::ElevenPoint,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub algorithm: Algorithm,
    /// Feature set: A (hue, value, LBP histogram) or B (hue, value) [default: A].
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seeds the hold-out split and the forest.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of each class held out [default: 0.2].
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Scale features to zero mean and unit variance before training.
    #[arg(long)]
    pub standardize: bool,
    /// RBF width [default: 0.005].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Soft-margin penalty [default: 1000].
    #[arg(long)]
    pub c: Option<f64>,
    /// SMO stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Neighbours for knn [default: 5].
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Trees for rf [default: 100].
    #[arg(long)]
    pub trees: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model file, evaluated on --manifest.
    #[arg(long, requires = "manifest")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub manifest: Option<PathBuf>,
    /// Expected feature variant of the model.
    #[arg(long, requires = "model")]
    pub variant: Option<Variant>,
    /// JSON file with "labels" and row-major "counts" (rows are true classes).
    #[arg(long, conflicts_with_all = ["model", "detections"])]
    pub confusion: Option<PathBuf>,
    /// JSON array, per image, of detections {x, y, w, h, score, class}.
    #[arg(long, requires = "truth", conflicts_with = "model")]
    pub detections: Option<PathBuf>,
    /// JSON array, per image, of ground-truth boxes {x, y, w, h}.
    #[arg(long, requires = "detections")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub interpolation: Option<InterpolationArg>,
}

#[derive(Debug, Args)]
pub struct GradeArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Run defect detection on this cloud service instead of in process.
    #[arg(long, env = "GRADELINE_CLOUD_ADDR")]
    pub cloud_addr: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeCloudArgs {
    /// Interface to bind [default: 127.0.0.1].
    #[arg(long)]
    pub bind: Option<String>,
    /// TCP port; 0 picks a free one [default: 7200].
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Auto,
    Manual,
}

#[derive(Debug, Args)]
pub struct ServeEdgeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Interface to bind [default: 127.0.0.1].
    #[arg(long)]
    pub bind: Option<String>,
    /// Line (simulator) port; 0 picks a free one [default: 7100].
    #[arg(long)]
    pub port: Option<u16>,
    /// HTTP port for the console [default: 8080].
    #[arg(long)]
    pub http_port: Option<u16>,
    /// Cloud service address; without it ripened fruit is graded degraded.
    #[arg(long, env = "GRADELINE_CLOUD_ADDR")]
    pub cloud_addr: Option<String>,
    #[arg(long)]
    pub cloud_timeout_ms: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Append every event to this JSON-lines file.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Edge line address [default: 127.0.0.1:7100].
    #[arg(long, env = "GRADELINE_EDGE_ADDR")]
    pub edge_addr: Option<String>,
    /// Items per second [default: 2].
    #[arg(long)]
    pub rate: Option<f64>,
    /// Stop after this many items; runs until interrupted otherwise.
    #[arg(long)]
    pub items: Option<usize>,
    /// Class weights as unripened,ripened,overripened [default: 1,1,1].
    #[arg(long, value_parser = parse_mix)]
    pub mix: Option<[f64; 3]>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames held while the edge is unreachable [default: 64].
    #[arg(long)]
    pub buffer: Option<usize>,
    /// Write one scored record per item to this JSON-lines file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn parse_mix(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|p| format!("expected three weights, got {}", p.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn mix_parsing() {
        assert_eq!(parse_mix("1, 2,0.5").unwrap(), [1.0, 2.0, 0.5]);
        assert!(parse_mix("1,2").is_err());
        assert!(parse_mix("a,b,c").is_err());
    }
}
