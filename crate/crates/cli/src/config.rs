//! Settings file overlay. Precedence: built-in defaults < file < flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use gradeline_core::augmentation::{AugmentConfig, AugmentPlan};
use gradeline_core::classifiers::{ForestConfig, Metric, SvmConfig};
use gradeline_core::detection::SpotDetectorConfig;
use gradeline_core::evaluation::DetectionEvalConfig;
use gradeline_core::pipeline::RoutingPolicy;
use gradeline_core::segmentation::SegmentConfig;
use gradeline_services::simulator::ClassMix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub segmentation: SegmentConfig,
    pub routing: RoutingPolicy,
    pub detector: SpotDetectorConfig,
    pub svm: SvmConfig,
    pub forest: ForestConfig,
    pub knn: KnnSettings,
    pub training: TrainingSettings,
    pub augment: AugmentConfig,
    pub augment_plan: AugmentPlan,
    pub detection_eval: DetectionEvalConfig,
    pub edge: EdgeSettings,
    pub cloud: CloudSettings,
    pub simulator: SimulatorSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSettings {
    pub k: usize,
    pub metric: Metric,
}

impl Default for KnnSettings {
    fn default() -> Self {
        Self { k: 5, metric: Metric::Euclidean }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub test_fraction: f64,
    pub standardize: bool,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self { test_fraction: 0.2, standardize: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSettings {
    pub bind: String,
    pub line_port: u16,
    pub http_port: u16,
    pub cloud_addr: Option<String>,
    pub cloud_timeout_ms: u64,
    pub max_line_bytes: usize,
    pub max_upload_bytes: usize,
    pub history: usize,
}

impl Default for EdgeSettings {
    fn default() -> Self {
        let d = gradeline_services::edge::EdgeConfig::default();
        Self {
            bind: "127.0.0.1".into(),
            line_port: 7100,
            http_port: 8080,
            cloud_addr: None,
            cloud_timeout_ms: d.cloud_timeout_ms,
            max_line_bytes: d.max_line_bytes,
            max_upload_bytes: d.max_upload_bytes,
            history: d.history,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudSettings {
    pub bind: String,
    pub port: u16,
    pub max_line_bytes: usize,
}

impl Default for CloudSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 7200,
            max_line_bytes: gradeline_services::cloud::CloudConfig::default().max_line_bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSettings {
    pub edge_addr: String,
    pub rate: f64,
    pub items: Option<usize>,
    pub mix: ClassMix,
    pub buffer: usize,
    pub reconnect_ms: u64,
    pub settle_ms: u64,
    pub jitter_bound_ms: u64,
}

impl Default for SimulatorSettings {
    fn default() -> Self {
        let d = gradeline_services::simulator::SimulatorConfig::default();
        Self {
            edge_addr: d.edge_addr,
            rate: d.rate,
            items: d.items,
            mix: d.mix,
            buffer: d.buffer,
            reconnect_ms: d.reconnect_ms,
            settle_ms: d.settle_ms,
            jitter_bound_ms: d.jitter_bound_ms,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The file named by `--config` or `GRADELINE_CONFIG`, or the defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
