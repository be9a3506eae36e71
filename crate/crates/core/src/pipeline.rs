//! Two-layer grading: segment, classify ripeness, and only for ripened fruit
//! count defects to split mid- from well-ripened. The result carries the
//! conveyor route.
//!
//! The stages are exposed separately ([`first_layer`], [`finish`]) so the
//! edge service can run layer 2 remotely and still assemble exactly the
//! result [`grade`] produces in-process.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifiers::{Classifier, Label, ModelFile};
use crate::detection::{ripeness_subclass, Detection, Detector, Subclass};
use crate::features::build_feature_vector;
use crate::imaging::RgbImage;
use crate::segmentation::{segment, Mask, SegmentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    Market,
    Defective,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Market => "Market",
            Route::Defective => "Defective",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradeStatus {
    Graded,
    /// No usable fruit region was found.
    Unclassifiable,
    /// Classified ripened but the defect stage could not run.
    Degraded,
}

/// Track for every outcome, plus optional annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingPolicy {
    pub unripened: Route,
    pub mid_ripened: Route,
    pub well_ripened: Route,
    pub overripened: Route,
    pub unclassifiable: Route,
    pub degraded: Route,
    pub well_ripened_annotation: Option<String>,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        Self {
            unripened: Route::Market,
            mid_ripened: Route::Market,
            well_ripened: Route::Market,
            overripened: Route::Defective,
            unclassifiable: Route::Defective,
            degraded: Route::Defective,
            well_ripened_annotation: Some("priority-sale".to_string()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradeConfig {
    pub segmentation: SegmentConfig,
    pub routing: RoutingPolicy,
}

/// Stage durations in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub segment_us: u64,
    pub features_us: u64,
    pub classify_us: u64,
    pub detect_us: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeResult {
    pub status: GradeStatus,
    /// Absent only when the frame is unclassifiable.
    pub label: Option<Label>,
    pub subclass: Option<Subclass>,
    pub detections: Vec<Detection>,
    pub route: Route,
    pub annotation: Option<String>,
    pub layer2_invoked: bool,
    /// Why the frame was not fully graded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub timings: Timings,
}

impl GradeResult {
    /// Copy with timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> GradeResult {
        GradeResult {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn same_outcome(&self, other: &GradeResult) -> bool {
        self.without_timings() == other.without_timings()
    }
}

/// Outcome of segmentation and first-layer classification.
#[derive(Clone, Debug)]
pub struct FirstLayer {
    pub label: Option<Label>,
    pub mask: Option<Mask>,
    pub reason: Option<String>,
    pub timings: Timings,
}

impl FirstLayer {
    pub fn needs_layer2(&self) -> bool {
        self.label == Some(Label::Ripened)
    }
}

/// Outcome of the defect stage as seen by the caller.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer2 {
    Detections(Vec<Detection>),
    Unavailable(String),
}

fn micros(start: Instant) -> u64 {
    start.elapsed().as_micros().try_into().unwrap_or(u64::MAX)
}

pub fn first_layer(img: &RgbImage, model: &ModelFile, cfg: &GradeConfig) -> FirstLayer {
    let mut timings = Timings::default();
    let t = Instant::now();
    let mask = segment(img, &cfg.segmentation);
    timings.segment_us = micros(t);
    let mask = match mask {
        Ok(m) if !m.is_empty() => m,
        Ok(_) => return unclassifiable("segmentation found no fruit".into(), timings),
        Err(e) => return unclassifiable(e.to_string(), timings),
    };
    let t = Instant::now();
    let features = build_feature_vector(img, &mask, model.variant);
    timings.features_us = micros(t);
    let features = match features {
        Ok(f) => f,
        Err(e) => return unclassifiable(e.to_string(), timings),
    };
    let t = Instant::now();
    let label = model.predict(&features.values);
    timings.classify_us = micros(t);
    FirstLayer {
        label: Some(label),
        mask: Some(mask),
        reason: None,
        timings,
    }
}

fn unclassifiable(reason: String, timings: Timings) -> FirstLayer {
    FirstLayer {
        label: None,
        mask: None,
        reason: Some(reason),
        timings,
    }
}

/// Assembles the final result. `layer2` is consulted only for ripened
/// fruit and is ignored otherwise.
pub fn finish(first: FirstLayer, layer2: Option<Layer2>, detect_us: Option<u64>, policy: &RoutingPolicy) -> GradeResult {
    let mut timings = first.timings;
    let Some(label) = first.label else {
        return GradeResult {
            status: GradeStatus::Unclassifiable,
            label: None,
            subclass: None,
            detections: Vec::new(),
            route: policy.unclassifiable,
            annotation: None,
            layer2_invoked: false,
            reason: first.reason,
            timings,
        };
    };
    let base = GradeResult {
        status: GradeStatus::Graded,
        label: Some(label),
        subclass: None,
        detections: Vec::new(),
        route: policy.unripened,
        annotation: None,
        layer2_invoked: false,
        reason: None,
        timings,
    };
    match label {
        Label::Unripened => base,
        Label::Overripened => GradeResult {
            route: policy.overripened,
            ..base
        },
        Label::Ripened => match layer2 {
            Some(Layer2::Detections(detections)) => {
                timings.detect_us = detect_us;
                let subclass = ripeness_subclass(&detections);
                let (route, annotation) = match subclass {
                    Subclass::MidRipened => (policy.mid_ripened, None),
                    Subclass::WellRipened => (policy.well_ripened, policy.well_ripened_annotation.clone()),
                };
                GradeResult {
                    subclass: Some(subclass),
                    detections,
                    route,
                    annotation,
                    layer2_invoked: true,
                    timings,
                    ..base
                }
            }
            Some(Layer2::Unavailable(reason)) => GradeResult {
                status: GradeStatus::Degraded,
                route: policy.degraded,
                reason: Some(reason),
                ..base
            },
            None => GradeResult {
                status: GradeStatus::Degraded,
                route: policy.degraded,
                reason: Some("defect stage was not run".into()),
                ..base
            },
        },
    }
}

/// In-process grading of one image.
pub fn grade(img: &RgbImage, model: &ModelFile, detector: &dyn Detector, cfg: &GradeConfig) -> GradeResult {
    let first = first_layer(img, model, cfg);
    if !first.needs_layer2() {
        return finish(first, None, None, &cfg.routing);
    }
    let mask = first.mask.as_ref().expect("classified frames carry a mask");
    let t = Instant::now();
    let layer2 = match detector.detect(img, mask) {
        Ok(d) => Layer2::Detections(d),
        Err(e) => Layer2::Unavailable(e.to_string()),
    };
    let detect_us = micros(t);
    finish(first, Some(layer2), Some(detect_us), &cfg.routing)
}
