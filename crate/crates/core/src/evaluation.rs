//! Classification and detection metrics.
//!
//! Per-class metrics whose denominator is zero are `None`, never 0.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifiers::Label;
use crate::detection::{iou, BBox, Detection, Subclass};
use crate::error::{Error, Result};

/// A closed, ordered set of categories usable as confusion-matrix axes.
pub trait CategoryLabel: Copy + Eq + 'static {
    fn categories() -> &'static [Self];
    fn category_index(self) -> usize;
    fn category_name(self) -> &'static str;
}

impl CategoryLabel for Label {
    fn categories() -> &'static [Self] {
        &Label::ALL
    }
    fn category_index(self) -> usize {
        self.index()
    }
    fn category_name(self) -> &'static str {
        self.name()
    }
}

impl CategoryLabel for Subclass {
    fn categories() -> &'static [Self] {
        &Subclass::ALL
    }
    fn category_index(self) -> usize {
        self as usize
    }
    fn category_name(self) -> &'static str {
        self.name()
    }
}

/// Rows are the true class, columns the predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("confusion matrix needs at least one label"));
        }
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::invalid(format!(
                "confusion counts must be {0}x{0} to match the labels",
                labels.len()
            )));
        }
        Ok(Self { labels, counts })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Sensitivity, one-vs-rest: TP / (TP + FN).
    pub fn recall_per_class(&self) -> Vec<Option<f64>> {
        (0..self.labels.len()).map(|i| ratio(self.counts[i][i], self.row_sum(i))).collect()
    }

    /// TP / (TP + FP).
    pub fn precision_per_class(&self) -> Vec<Option<f64>> {
        (0..self.labels.len()).map(|j| ratio(self.counts[j][j], self.col_sum(j))).collect()
    }

    /// 2TP / (2TP + FP + FN); absent when precision or recall is.
    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        (0..self.labels.len())
            .map(|i| {
                let tp = self.counts[i][i];
                let (row, col) = (self.row_sum(i), self.col_sum(i));
                if row == 0 || col == 0 {
                    return None;
                }
                ratio(2 * tp, row + col)
            })
            .collect()
    }

    pub fn report(&self) -> ClassificationReport {
        let recall = self.recall_per_class();
        let precision = self.precision_per_class();
        let f1 = self.f1_per_class();
        ClassificationReport {
            accuracy: self.accuracy(),
            total: self.total(),
            classes: self
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| ClassMetrics {
                    label: l.clone(),
                    support: self.row_sum(i),
                    recall: recall[i],
                    precision: precision[i],
                    f1: f1[i],
                })
                .collect(),
            matrix: self.clone(),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", v * 100.0))
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(8);
        write!(f, "{:width$}", "true\\pred")?;
        for l in &self.labels {
            write!(f, " {l:>width$}")?;
        }
        writeln!(f)?;
        for (l, row) in self.labels.iter().zip(&self.counts) {
            write!(f, "{l:width$}")?;
            for c in row {
                write!(f, " {c:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn confusion<L: CategoryLabel>(pred: &[L], truth: &[L]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let cats = L::categories();
    let mut counts = vec![vec![0u64; cats.len()]; cats.len()];
    for (p, t) in pred.iter().zip(truth) {
        counts[t.category_index()][p.category_index()] += 1;
    }
    ConfusionMatrix::from_counts(cats.iter().map(|c| c.category_name().to_string()).collect(), counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: Option<f64>,
    pub total: u64,
    pub classes: Vec<ClassMetrics>,
    pub matrix: ConfusionMatrix,
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.matrix)?;
        writeln!(f)?;
        writeln!(f, "{:<12} {:>8} {:>10} {:>10} {:>10}", "class", "support", "recall", "precision", "f1")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<12} {:>8} {:>10} {:>10} {:>10}",
                c.label,
                c.support,
                pct(c.recall),
                pct(c.precision),
                pct(c.f1)
            )?;
        }
        writeln!(f, "accuracy {} over {} samples", pct(self.accuracy), self.total)
    }
}

/// How the PR curve is turned into a single AP number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// `Σ (r_i − r_{i−1}) · p_i` over the ranked detections.
    #[default]
    Stepwise,
    /// As above, but with `p_i` replaced by the best precision at any recall
    /// `≥ r_i`.
    AllPoint,
    /// Mean interpolated precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionEvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
}

impl Default for DetectionEvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::Stepwise,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// One point per ranked detection, highest score first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Builds the curve from `(score, is_true_positive)` pairs. Equal scores
    /// keep their input order.
    pub fn from_ranked(hits: &[(f64, bool)], n_truths: usize) -> Self {
        let mut order: Vec<usize> = (0..hits.len()).collect();
        order.sort_by(|&a, &b| hits[b].0.total_cmp(&hits[a].0));
        let mut tp = 0usize;
        let points = order
            .iter()
            .enumerate()
            .map(|(rank, &i)| {
                if hits[i].1 {
                    tp += 1;
                }
                PrPoint {
                    score: hits[i].0,
                    recall: if n_truths == 0 { 0.0 } else { tp as f64 / n_truths as f64 },
                    precision: tp as f64 / (rank + 1) as f64,
                }
            })
            .collect();
        Self { points }
    }

    pub fn average_precision(&self, interpolation: Interpolation) -> f64 {
        let pts = &self.points;
        // Best precision at this rank or any later one.
        let mut envelope = vec![0.0; pts.len()];
        let mut best: f64 = 0.0;
        for i in (0..pts.len()).rev() {
            best = best.max(pts[i].precision);
            envelope[i] = best;
        }
        match interpolation {
            Interpolation::Stepwise | Interpolation::AllPoint => {
                let mut prev = 0.0;
                let mut ap = 0.0;
                for (i, p) in pts.iter().enumerate() {
                    if p.recall > prev {
                        let prec = if interpolation == Interpolation::Stepwise { p.precision } else { envelope[i] };
                        ap += (p.recall - prev) * prec;
                        prev = p.recall;
                    }
                }
                ap
            }
            Interpolation::ElevenPoint => {
                let mut sum = 0.0;
                for step in 0..=10 {
                    let r = step as f64 / 10.0;
                    let p = pts
                        .iter()
                        .zip(&envelope)
                        .find(|(p, _)| p.recall >= r - 1e-12)
                        .map_or(0.0, |(_, &e)| e);
                    sum += p;
                }
                sum / 11.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvalResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Mean IoU over matched pairs; absent without matches.
    pub average_iou: Option<f64>,
    /// Absent when there is no ground truth.
    pub ap: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub curve: PrCurve,
}

impl fmt::Display for DetectionEvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "tp {}  fp {}  fn {}", self.tp, self.fp, self.fn_)?;
        writeln!(f, "recall      {}", pct(self.recall))?;
        writeln!(f, "precision   {}", pct(self.precision))?;
        writeln!(f, "average IoU {}", opt(self.average_iou))?;
        writeln!(f, "AP          {}", opt(self.ap))
    }
}

/// Predictions and ground truth for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub predictions: Vec<Detection>,
    pub truths: Vec<BBox>,
}

/// Greedy matching inside one image. Returns, per prediction in input
/// order, the IoU of its matched truth (`None` for a false positive).
fn greedy_match(preds: &[Detection], truths: &[BBox], threshold: f64) -> Vec<Option<f64>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; truths.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (t, tb) in truths.iter().enumerate() {
            if taken[t] {
                continue;
            }
            let v = iou(&preds[i].bbox, tb);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        if let Some((t, v)) = best {
            taken[t] = true;
            out[i] = Some(v);
        }
    }
    out
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {t} must lie in (0, 1]")));
    }
    Ok(())
}

/// Matches each image independently, then ranks all predictions together
/// for the PR curve.
pub fn evaluate_detections(images: &[ImageDetections], cfg: &DetectionEvalConfig) -> Result<DetectionEvalResult> {
    check_threshold(cfg.iou_threshold)?;
    let mut hits = Vec::new();
    let mut ious = Vec::new();
    let mut n_truths = 0;
    for img in images {
        n_truths += img.truths.len();
        for (p, m) in img.predictions.iter().zip(greedy_match(&img.predictions, &img.truths, cfg.iou_threshold)) {
            hits.push((p.score, m.is_some()));
            ious.extend(m);
        }
    }
    let tp = ious.len();
    let fp = hits.len() - tp;
    let curve = PrCurve::from_ranked(&hits, n_truths);
    Ok(DetectionEvalResult {
        tp,
        fp,
        fn_: n_truths - tp,
        average_iou: (tp > 0).then(|| ious.iter().sum::<f64>() / tp as f64),
        ap: (n_truths > 0).then(|| curve.average_precision(cfg.interpolation)),
        recall: ratio(tp as u64, n_truths as u64),
        precision: ratio(tp as u64, hits.len() as u64),
        curve,
    })
}

pub fn match_detections(preds: &[Detection], truths: &[BBox], iou_threshold: f64) -> Result<DetectionEvalResult> {
    evaluate_detections(
        &[ImageDetections {
            predictions: preds.to_vec(),
            truths: truths.to_vec(),
        }],
        &DetectionEvalConfig {
            iou_threshold,
            ..Default::default()
        },
    )
}

/// Single-class AP; errors when there is no ground truth.
pub fn average_precision(preds: &[Detection], truths: &[BBox], cfg: &DetectionEvalConfig) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::invalid("average precision needs at least one ground-truth box"));
    }
    let r = evaluate_detections(
        &[ImageDetections {
            predictions: preds.to_vec(),
            truths: truths.to_vec(),
        }],
        cfg,
    )?;
    Ok(r.ap.expect("truths are non-empty"))
}

/// Mean of per-class AP values.
pub fn mean_average_precision(per_class: &[f64]) -> Option<f64> {
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}
