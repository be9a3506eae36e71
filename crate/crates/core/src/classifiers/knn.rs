use serde::{Deserialize, Serialize};

use super::{Classifier, Label, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    Manhattan,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

/// Lazy learner: keeps the training set and votes among the `k` nearest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub metric: Metric,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl KnnModel {
    pub fn train(ds: &LabeledDataset, k: usize, metric: Metric) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if k > ds.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the {} training samples",
                ds.len()
            )));
        }
        Ok(Self {
            k,
            metric,
            features: ds.features().to_vec(),
            labels: ds.labels().to_vec(),
        })
    }
}

impl Classifier for KnnModel {
    /// Majority among the `k` nearest; equal distances are ordered by label
    /// so the neighbour set does not depend on training order. Vote ties go
    /// to the smaller summed distance, then to label order.
    fn predict(&self, x: &[f64]) -> Label {
        let mut dists: Vec<(f64, Label)> = self
            .features
            .iter()
            .zip(&self.labels)
            .map(|(f, &l)| (self.metric.distance(f, x), l))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut votes = [0usize; Label::COUNT];
        let mut summed = [0.0f64; Label::COUNT];
        for &(d, l) in &dists[..self.k] {
            votes[l.index()] += 1;
            summed[l.index()] += d;
        }
        let mut best = None::<usize>;
        for i in 0..Label::COUNT {
            if votes[i] == 0 {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if votes[i] > votes[b] || (votes[i] == votes[b] && summed[i] < summed[b]) => Some(i),
                keep => keep,
            };
        }
        Label::ALL[best.expect("k >= 1")]
    }
}
