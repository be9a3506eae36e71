//! Versioned JSON model files.
//!
//! ```json
//! {
//!   "format": "gradeline-model",
//!   "version": 1,
//!   "variant": "A",
//!   "lbp_order": "top-left-clockwise",
//!   "standardizer": null,
//!   "model": { "algorithm": "svm", "params": { ... } }
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a loaded model
//! predicts bit-identically to the one that was saved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Classifier, ForestModel, KnnModel, Label, LabeledDataset, NbModel, SvmModel};
use crate::error::{Error, Result};
use crate::features::{Variant, LBP_ORDER_TAG};

pub const FORMAT_TAG: &str = "gradeline-model";
pub const FORMAT_VERSION: u32 = 1;

/// Per-dimension z-scoring fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant dimensions get unit scale.
    pub fn fit(ds: &LabeledDataset) -> Self {
        let n = ds.len() as f64;
        let dim = ds.dim();
        let mut mean = vec![0.0; dim];
        for x in ds.features() {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for x in ds.features() {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_dataset(&self, ds: &LabeledDataset) -> LabeledDataset {
        ds.map_features(|x| self.apply(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", content = "params", rename_all = "lowercase")]
pub enum Model {
    Knn(KnnModel),
    Nb(NbModel),
    Rf(ForestModel),
    Svm(SvmModel),
}

impl Model {
    pub fn algorithm(&self) -> &'static str {
        match self {
            Model::Knn(_) => "knn",
            Model::Nb(_) => "nb",
            Model::Rf(_) => "rf",
            Model::Svm(_) => "svm",
        }
    }
}

impl Classifier for Model {
    fn predict(&self, x: &[f64]) -> Label {
        match self {
            Model::Knn(m) => m.predict(x),
            Model::Nb(m) => m.predict(x),
            Model::Rf(m) => m.predict(x),
            Model::Svm(m) => m.predict(x),
        }
    }
}

/// A trained first-layer classifier plus everything needed to feed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub lbp_order: String,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
    pub model: Model,
}

impl ModelFile {
    pub fn new(variant: Variant, standardizer: Option<Standardizer>, model: Model) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            variant,
            lbp_order: LBP_ORDER_TAG.to_string(),
            standardizer,
            model,
        }
    }

    pub fn ensure_variant(&self, expected: Variant) -> Result<()> {
        if self.variant != expected {
            return Err(Error::VariantMismatch {
                expected: expected.to_string(),
                found: self.variant.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialisation cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Corrupt("empty model file".into()));
        }
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
            return Err(Error::Corrupt(format!("missing \"format\": \"{FORMAT_TAG}\" tag")));
        }
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt("missing version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version as u32,
            });
        }
        let file: ModelFile = serde_json::from_value(raw).map_err(|e| Error::Corrupt(e.to_string()))?;
        if file.lbp_order != LBP_ORDER_TAG {
            return Err(Error::Corrupt(format!(
                "model was trained with LBP ordering {:?}, this build uses {LBP_ORDER_TAG:?}",
                file.lbp_order
            )));
        }
        Ok(file)
    }
}

impl Classifier for ModelFile {
    fn predict(&self, x: &[f64]) -> Label {
        match &self.standardizer {
            Some(s) => self.model.predict(&s.apply(x)),
            None => self.model.predict(x),
        }
    }
}

pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_json(&text)
}

/// Loads and checks that the model was trained on `variant` features.
pub fn load_model_for(path: impl AsRef<Path>, variant: Variant) -> Result<ModelFile> {
    let m = load_model(path)?;
    m.ensure_variant(variant)?;
    Ok(m)
}
