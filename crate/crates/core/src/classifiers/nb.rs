use serde::{Deserialize, Serialize};

use super::{Classifier, Label, LabeledDataset};
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Gaussian naive Bayes. Classes absent from training keep `prior = 0` and
/// are never predicted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbModel {
    pub priors: [f64; Label::COUNT],
    /// Per class, per dimension.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl NbModel {
    pub fn train(ds: &LabeledDataset) -> Result<Self> {
        let dim = ds.dim();
        let mut counts = [0usize; Label::COUNT];
        let mut sums = vec![vec![0.0; dim]; Label::COUNT];
        for (x, l) in ds.iter() {
            counts[l.index()] += 1;
            for (s, v) in sums[l.index()].iter_mut().zip(x) {
                *s += v;
            }
        }
        for l in Label::ALL {
            let c = counts[l.index()];
            if c == 1 {
                return Err(Error::invalid(format!(
                    "class {l} has {c} sample; at least 2 are needed for a variance"
                )));
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(counts)
            .map(|(s, c)| s.iter().map(|v| if c == 0 { 0.0 } else { v / c as f64 }).collect())
            .collect();
        let mut sq = vec![vec![0.0; dim]; Label::COUNT];
        for (x, l) in ds.iter() {
            let i = l.index();
            for ((acc, v), m) in sq[i].iter_mut().zip(x).zip(&means[i]) {
                *acc += (v - m) * (v - m);
            }
        }
        let variances = sq
            .iter()
            .zip(counts)
            .map(|(s, c)| {
                s.iter()
                    .map(|v| if c < 2 { 1.0 } else { (v / (c - 1) as f64).max(VARIANCE_FLOOR) })
                    .collect()
            })
            .collect();
        let n = ds.len() as f64;
        let priors = counts.map(|c| c as f64 / n);
        Ok(Self {
            priors,
            means,
            variances,
        })
    }

    /// `log P(Y) + Σ log N(x_i; μ, σ²)` for every class; `None` for classes
    /// that were not trained.
    pub fn log_posteriors(&self, x: &[f64]) -> [Option<f64>; Label::COUNT] {
        let mut out = [None; Label::COUNT];
        for (i, slot) in out.iter_mut().enumerate() {
            if self.priors[i] == 0.0 {
                continue;
            }
            let mut lp = self.priors[i].ln();
            for ((v, m), var) in x.iter().zip(&self.means[i]).zip(&self.variances[i]) {
                lp += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (v - m) * (v - m) / (2.0 * var);
            }
            *slot = Some(lp);
        }
        out
    }
}

impl Classifier for NbModel {
    fn predict(&self, x: &[f64]) -> Label {
        let mut best: Option<(usize, f64)> = None;
        for (i, lp) in self.log_posteriors(x).into_iter().enumerate() {
            if let Some(lp) = lp {
                if best.is_none_or(|(_, b)| lp > b) {
                    best = Some((i, lp));
                }
            }
        }
        Label::ALL[best.expect("at least one trained class").0]
    }
}
