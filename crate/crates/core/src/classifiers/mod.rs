//! First-layer ripeness classifiers.
//!
//! Four interchangeable models (k-nearest neighbours, Gaussian naive Bayes,
//! random forest and an RBF support vector machine) trained on
//! [`FeatureVector`]s. All tie-breaks fall back to the fixed [`Label`] order
//! so predictions are deterministic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, Variant};

pub mod forest;
pub mod knn;
pub mod model_file;
pub mod nb;
pub mod svm;

pub use forest::{ForestConfig, ForestModel};
pub use knn::{KnnModel, Metric};
pub use model_file::{load_model, load_model_for, save_model, Model, ModelFile, Standardizer};
pub use nb::NbModel;
pub use svm::{SvmConfig, SvmModel};

/// Ripeness class, ordered for matrix indexing and tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Unripened,
    Ripened,
    Overripened,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Unripened, Label::Ripened, Label::Overripened];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Unripened => "Unripened",
            Label::Ripened => "Ripened",
            Label::Overripened => "Overripened",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "unripened" | "unripe" => Ok(Label::Unripened),
            "ripened" | "ripe" => Ok(Label::Ripened),
            "overripened" | "overripe" => Ok(Label::Overripened),
            _ => Err(Error::invalid(format!("unknown label {s:?}"))),
        }
    }
}

/// Homogeneous set of labelled feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    variant: Variant,
    features: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

impl LabeledDataset {
    pub fn new(variant: Variant, samples: Vec<(FeatureVector, Label)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let mut features = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for (fv, label) in samples {
            if fv.variant != variant || fv.values.len() != variant.dims() {
                return Err(Error::VariantMismatch {
                    expected: variant.to_string(),
                    found: fv.variant.to_string(),
                });
            }
            features.push(fv.values);
            labels.push(label);
        }
        Ok(Self {
            variant,
            features,
            labels,
        })
    }

    /// Builds from raw rows; every row must have the same length. The
    /// variant tag is attached only when the width matches one.
    pub fn from_rows(variant: Variant, features: Vec<Vec<f64>>, labels: Vec<Label>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if features.len() != labels.len() {
            return Err(Error::invalid("features and labels differ in length"));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("rows have inconsistent dimensionality"));
        }
        Ok(Self {
            variant,
            features,
            labels,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], Label)> {
        self.features.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    pub fn classes_present(&self) -> Vec<Label> {
        let mut present: Vec<Label> = Label::ALL
            .into_iter()
            .filter(|l| self.labels.contains(l))
            .collect();
        present.sort();
        present
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::from_rows(
            self.variant,
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub(crate) fn map_features(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            variant: self.variant,
            features: self.features.iter().map(|x| f(x)).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Anything that maps a feature slice to a ripeness label.
pub trait Classifier {
    fn predict(&self, x: &[f64]) -> Label;

    fn predict_all(&self, xs: &[Vec<f64>]) -> Vec<Label> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// Plurality vote over `Label::ALL`; ties go to the earlier label.
pub(crate) fn plurality(votes: &[usize; Label::COUNT]) -> Label {
    let mut best = 0;
    for i in 1..Label::COUNT {
        if votes[i] > votes[best] {
            best = i;
        }
    }
    Label::ALL[best]
}
