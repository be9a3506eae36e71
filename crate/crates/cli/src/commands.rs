//! Offline workflows: corpus generation, augmentation, training, evaluation
//! and single-image grading.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use gradeline_core::augmentation::{augment_dataset, AugmentPlan, DatasetManifest, ManifestEntry};
use gradeline_core::classifiers::*;
use gradeline_core::dataset::{build_corpus, extract_datasets, generate_dataset, stratified_split, CorpusPlan, TruthRecord};
use gradeline_core::detection::{BBox, Detection, SpotDetector};
use gradeline_core::evaluation::{confusion, evaluate_detections, ClassificationReport, ConfusionMatrix, DetectionEvalConfig, ImageDetections, Interpolation};
use gradeline_core::features::Variant;
use gradeline_core::imaging::load_image;
use gradeline_core::pipeline::{finish, first_layer, grade, GradeConfig, Layer2, Route};
use gradeline_services::edge::CloudClient;

use crate::cli::*;
use crate::config::FileConfig;
use crate::output::Output;

/// Path as written into a manifest under `base`: relative when inside it,
/// absolute otherwise.
fn portable(path: &Path, base: &Path) -> PathBuf {
    match path.strip_prefix(base) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()),
    }
}

fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let entries = manifest
        .entries()
        .iter()
        .map(|e| ManifestEntry { path: portable(&e.path, dir), ..e.clone() })
        .collect();
    let path = dir.join("manifest.jsonl");
    DatasetManifest::new(entries)?.save(&path)?;
    Ok(path)
}

fn write_truth(truths: &[TruthRecord], dir: &Path) -> Result<PathBuf> {
    let mut text = String::new();
    for t in truths {
        let rec = TruthRecord { path: portable(&t.path, dir), truth: t.truth.clone() };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    let path = dir.join("truth.jsonl");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn manifest_summary(manifest_path: &Path, truth_path: &Path, m: &DatasetManifest) -> Value {
    json!({
        "manifest": manifest_path,
        "truth": truth_path,
        "entries": m.len(),
        "by_label": m.counts_by_label().iter().map(|(k, v)| (k.name(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
        "by_tag": m.counts_by_tag().iter().map(|(k, v)| (k.name(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
    })
}

pub fn generate(args: &GenerateArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let (m, truths) = generate_dataset(&args.out, args.per_class, seed)?;
    let (mp, tp) = (write_manifest(&m, &args.out)?, write_truth(&truths, &args.out)?);
    out.emit(&manifest_summary(&mp, &tp, &m), None)
}

pub fn corpus(args: &CorpusArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let d = CorpusPlan::default();
    let plan = CorpusPlan {
        originals_per_class: args.per_class.unwrap_or(d.originals_per_class),
        augment: AugmentPlan {
            rotation: args.rotation.unwrap_or(d.augment.rotation),
            flipping: args.flipping.unwrap_or(d.augment.flipping),
            shifting: args.shifting.unwrap_or(d.augment.shifting),
        },
        synthetic: args.synthetic.unwrap_or(d.synthetic),
    };
    let (m, truths) = build_corpus(&args.out, &plan, seed, &cfg.augment)?;
    let (mp, tp) = (write_manifest(&m, &args.out)?, write_truth(&truths, &args.out)?);
    out.emit(&manifest_summary(&mp, &tp, &m), None)
}

pub fn augment(args: &AugmentArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let plan = AugmentPlan {
        rotation: args.rotation.unwrap_or(cfg.augment_plan.rotation),
        flipping: args.flipping.unwrap_or(cfg.augment_plan.flipping),
        shifting: args.shifting.unwrap_or(cfg.augment_plan.shifting),
    };
    let mut acfg = cfg.augment;
    if let Some(a) = args.max_angle {
        acfg.max_angle = a;
    }
    if let Some(s) = args.max_shift {
        acfg.max_shift_frac = s;
    }
    let source = DatasetManifest::load(&args.manifest)?;
    source.check_files()?;
    let m = augment_dataset(&source, &plan, seed, &args.out, &acfg)?;
    let mp = write_manifest(&m, &args.out)?;
    out.emit(
        &json!({
            "manifest": mp,
            "entries": m.len(),
            "by_tag": m.counts_by_tag().iter().map(|(k, v)| (k.name(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
        }),
        None,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub algorithm: String,
    pub variant: Variant,
    pub params: Value,
    pub standardized: bool,
    pub seed: u64,
    pub test_fraction: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub train_accuracy: Option<f64>,
    /// Absent when nothing is held out.
    pub heldout: Option<ClassificationReport>,
    pub model: PathBuf,
    pub timings: TrainTimings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTimings {
    pub features_s: f64,
    pub train_s: f64,
    pub wall_s: f64,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn evaluate(model: &ModelFile, ds: &LabeledDataset) -> Result<ClassificationReport> {
    let pred = model.predict_all(ds.features());
    Ok(confusion(&pred, ds.labels())?.report())
}

pub fn train(args: &TrainArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let start = Instant::now();
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let test_fraction = args.test_fraction.unwrap_or(cfg.training.test_fraction);
    let standardize = args.standardize || cfg.training.standardize;
    let variant = args.variant.unwrap_or(Variant::A);

    let mut svm = cfg.svm;
    svm.gamma = args.gamma.unwrap_or(svm.gamma);
    svm.c = args.c.unwrap_or(svm.c);
    svm.tol = args.tol.unwrap_or(svm.tol);
    let mut forest = cfg.forest;
    forest.trees = args.trees.unwrap_or(forest.trees);
    if args.seed.is_some() {
        forest.seed = seed;
    }
    let k = args.k.unwrap_or(cfg.knn.k);
    let metric = args.metric.map_or(cfg.knn.metric, Metric::from);

    // Reject bad settings before the expensive part.
    match args.algorithm {
        Algorithm::Svm => ensure!(svm.gamma > 0.0 && svm.c > 0.0 && svm.tol > 0.0, "svm needs gamma, c and tol > 0"),
        Algorithm::Knn => ensure!(k > 0, "k must be at least 1"),
        Algorithm::Rf => ensure!(forest.trees > 0, "a forest needs at least one tree"),
        Algorithm::Nb => {}
    }
    ensure!((0.0..1.0).contains(&test_fraction), "test fraction {test_fraction} must lie in [0, 1)");

    let manifest = DatasetManifest::load(&args.manifest)?;
    ensure!(!manifest.is_empty(), "manifest {} has no entries", args.manifest.display());
    manifest.check_files()?;

    let t = Instant::now();
    let ds = extract_datasets(&manifest, &[variant], &cfg.segmentation)?.remove(0);
    let features_s = secs(t.elapsed());
    let (train_idx, test_idx) = stratified_split(ds.labels(), test_fraction, seed)?;
    let train_ds = ds.subset(&train_idx)?;
    let test_ds = (!test_idx.is_empty()).then(|| ds.subset(&test_idx)).transpose()?;
    if let Algorithm::Knn = args.algorithm {
        ensure!(k <= train_ds.len(), "k = {k} exceeds the {} training samples", train_ds.len());
    }

    let t = Instant::now();
    let standardizer = standardize.then(|| Standardizer::fit(&train_ds));
    let fit_ds = standardizer.as_ref().map_or_else(|| train_ds.clone(), |s| s.apply_dataset(&train_ds));
    let (model, params) = match args.algorithm {
        Algorithm::Svm => (Model::Svm(SvmModel::train(&fit_ds, &svm)?), serde_json::to_value(svm)?),
        Algorithm::Knn => (Model::Knn(KnnModel::train(&fit_ds, k, metric)?), json!({ "k": k, "metric": metric })),
        Algorithm::Nb => (Model::Nb(NbModel::train(&fit_ds)?), json!({})),
        Algorithm::Rf => (Model::Rf(ForestModel::train(&fit_ds, &forest)?), serde_json::to_value(forest)?),
    };
    let train_s = secs(t.elapsed());
    let model = ModelFile::new(variant, standardizer, model);
    save_model(&model, &args.out)?;

    let train_accuracy = evaluate(&model, &train_ds)?.accuracy;
    let heldout = test_ds.as_ref().map(|d| evaluate(&model, d)).transpose()?;
    let report = TrainReport {
        algorithm: model.model.algorithm().to_string(),
        variant,
        params,
        standardized: standardize,
        seed,
        test_fraction,
        train_size: train_ds.len(),
        test_size: test_idx.len(),
        train_accuracy,
        heldout,
        model: args.out.clone(),
        timings: TrainTimings { features_s, train_s, wall_s: secs(start.elapsed()) },
    };
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    let table = format!(
        "{} on variant {} ({} train / {} held out)\n{}",
        report.algorithm,
        variant,
        report.train_size,
        report.test_size,
        report.heldout.as_ref().map_or("nothing held out".to_string(), |r| r.to_string())
    );
    out.emit(&report, Some(table))
}

#[derive(Deserialize)]
struct ConfusionFile {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn eval(args: &EvalArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    match (&args.model, &args.manifest, &args.confusion, &args.detections, &args.truth) {
        (Some(model), Some(manifest), None, None, None) => {
            let model = load_model(model)?;
            if let Some(v) = args.variant {
                model.ensure_variant(v)?;
            }
            let manifest = DatasetManifest::load(manifest)?;
            manifest.check_files()?;
            let ds = extract_datasets(&manifest, &[model.variant], &cfg.segmentation)?.remove(0);
            let report = evaluate(&model, &ds)?;
            let table = report.to_string();
            out.emit(&report, Some(table))
        }
        (None, None, Some(path), None, None) => {
            let f: ConfusionFile = read_json(path)?;
            let report = ConfusionMatrix::from_counts(f.labels, f.counts)?.report();
            let table = report.to_string();
            out.emit(&report, Some(table))
        }
        (None, None, None, Some(dets), Some(truth)) => {
            let preds: Vec<Vec<Detection>> = read_json(dets)?;
            let truths: Vec<Vec<BBox>> = read_json(truth)?;
            ensure!(
                preds.len() == truths.len(),
                "{} images of detections but {} of ground truth",
                preds.len(),
                truths.len()
            );
            let images: Vec<ImageDetections> = preds.into_iter().zip(truths).map(|(predictions, truths)| ImageDetections { predictions, truths }).collect();
            let ecfg = DetectionEvalConfig {
                iou_threshold: args.iou_threshold.unwrap_or(cfg.detection_eval.iou_threshold),
                interpolation: args.interpolation.map_or(cfg.detection_eval.interpolation, Interpolation::from),
            };
            let result = evaluate_detections(&images, &ecfg)?;
            let table = result.to_string();
            out.emit(&result, Some(table))
        }
        _ => bail!("eval needs --model with --manifest, or --confusion, or --detections with --truth"),
    }
}

pub fn grade_image(args: &GradeArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    if let Some(v) = args.variant {
        model.ensure_variant(v)?;
    }
    let img = load_image(&args.image)?;
    let gcfg = GradeConfig { segmentation: cfg.segmentation.clone(), routing: cfg.routing.clone() };
    let cloud_addr = args.cloud_addr.clone().or_else(|| cfg.edge.cloud_addr.clone());
    let result = match cloud_addr {
        None => grade(&img, &model, &SpotDetector::new(cfg.detector)?, &gcfg),
        Some(addr) => {
            let first = first_layer(&img, &model, &gcfg);
            if !first.needs_layer2() {
                finish(first, None, None, &gcfg.routing)
            } else {
                let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
                let client = CloudClient::new(addr, Duration::from_millis(cfg.edge.cloud_timeout_ms), cfg.edge.max_line_bytes);
                let mask = first.mask.clone().expect("classified frames carry a mask");
                let t = Instant::now();
                let layer2: Layer2 = rt.block_on(client.detect(&img, &mask));
                finish(first, Some(layer2), Some(t.elapsed().as_micros() as u64), &gcfg.routing)
            }
        }
    };
    let table = format!(
        "{}: {} -> {}{}",
        args.image.display(),
        result.label.map_or("unclassifiable".to_string(), |l| l.to_string()),
        result.route,
        result.subclass.map_or(String::new(), |s| format!(" ({s}, {} spots)", result.detections.len())),
    );
    out.emit(&result, Some(table))?;
    Ok(match result.route {
        Route::Market => ExitCode::SUCCESS,
        Route::Defective => ExitCode::from(2),
    })
}
