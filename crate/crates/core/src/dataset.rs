//! Synthetic corpora laid out like the augmented training set, plus bulk
//! feature extraction and hold-out splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_dataset, AugmentConfig, AugmentPlan, DatasetManifest, ManifestEntry, Tag};
use crate::classifiers::{Label, LabeledDataset};
use crate::detection::Subclass;
use crate::error::{Error, Result};
use crate::features::{build_feature_vector, Variant};
use crate::imaging::{load_image, save_image};
use crate::segmentation::{segment, SegmentConfig};
use crate::synth::{generate_synthetic, random_spot_count, GroundTruth, Synthetic, SyntheticSpec};

/// Draws a spec for one item. Ripened fruit without a requested subclass
/// is mid or well with equal odds.
pub fn draw_spec(label: Label, subclass: Option<Subclass>, seed: u64) -> Result<SyntheticSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let subclass = match (label, subclass) {
        (Label::Ripened, None) => Some(if rng.random_bool(0.5) { Subclass::MidRipened } else { Subclass::WellRipened }),
        (Label::Ripened, s) => s,
        (_, None) => None,
        (_, Some(_)) => return Err(Error::invalid(format!("{label} fruit has no subclass"))),
    };
    let spots = random_spot_count(label, subclass, &mut rng);
    SyntheticSpec::random(label, spots, seed)
}

pub fn draw_item(label: Label, subclass: Option<Subclass>, seed: u64) -> Result<Synthetic> {
    generate_synthetic(&draw_spec(label, subclass, seed)?)
}

/// Corpus layout: rendered originals, augmented copies of them, and extra
/// rendered ripened images under the `synthetic` tag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusPlan {
    pub originals_per_class: usize,
    pub augment: AugmentPlan,
    pub synthetic: usize,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        Self {
            originals_per_class: 50,
            augment: AugmentPlan {
                rotation: 250,
                flipping: 250,
                shifting: 250,
            },
            synthetic: 100,
        }
    }
}

impl CorpusPlan {
    pub fn total(&self) -> usize {
        3 * self.originals_per_class + self.augment.total() + self.synthetic
    }
}

/// Ground truth of a rendered image, keyed by its manifest path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub path: PathBuf,
    #[serde(flatten)]
    pub truth: GroundTruth,
}

fn render(dir: &Path, tag: Tag, index: usize, label: Label, subclass: Option<Subclass>, seed: u64) -> Result<(ManifestEntry, TruthRecord)> {
    let item = draw_item(label, subclass, seed)?;
    let path = dir.join(format!("{tag}_{index:05}.png"));
    save_image(&item.image, &path)?;
    let entry = ManifestEntry {
        path: path.clone(),
        label,
        tag,
        subclass: item.truth.subclass,
    };
    Ok((entry, TruthRecord { path, truth: item.truth }))
}

/// Renders `per_class` originals of each class into `dir`; ripened fruit is
/// split evenly between mid and well (mid takes the odd one).
pub fn generate_dataset(dir: impl AsRef<Path>, per_class: usize, seed: u64) -> Result<(DatasetManifest, Vec<TruthRecord>)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(3 * per_class);
    for label in Label::ALL {
        for i in 0..per_class {
            let subclass = (label == Label::Ripened).then(|| if i < per_class.div_ceil(2) { Subclass::MidRipened } else { Subclass::WellRipened });
            jobs.push((label, subclass, rng.random::<u64>()));
        }
    }
    let rendered = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(label, sub, s))| render(dir, Tag::Original, i, label, sub, s))
        .collect::<Result<Vec<_>>>()?;
    let (entries, truths): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    Ok((DatasetManifest::new(entries)?, truths))
}

/// Renders, augments and writes a full corpus into `dir`. Returns the
/// manifest and the ground truth of every rendered (non-augmented) image.
pub fn build_corpus(dir: impl AsRef<Path>, plan: &CorpusPlan, seed: u64, augment: &AugmentConfig) -> Result<(DatasetManifest, Vec<TruthRecord>)> {
    let dir = dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (originals_seed, augment_seed) = (rng.random::<u64>(), rng.random::<u64>());
    let synthetic: Vec<u64> = (0..plan.synthetic).map(|_| rng.random()).collect();

    let (base, mut truths) = generate_dataset(dir, plan.originals_per_class, originals_seed)?;
    let augmented = augment_dataset(&base, &plan.augment, augment_seed, dir, augment)?;
    let extra = synthetic
        .par_iter()
        .enumerate()
        .map(|(i, &s)| render(dir, Tag::Synthetic, i, Label::Ripened, None, s))
        .collect::<Result<Vec<_>>>()?;
    let mut all = augmented.entries().to_vec();
    for (entry, truth) in extra {
        all.push(entry);
        truths.push(truth);
    }
    Ok((DatasetManifest::new(all)?, truths))
}

/// Segments every image once and builds one dataset per requested variant,
/// in manifest order.
pub fn extract_datasets(manifest: &DatasetManifest, variants: &[Variant], cfg: &SegmentConfig) -> Result<Vec<LabeledDataset>> {
    let rows = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let img = load_image(&e.path)?;
            let mask = segment(&img, cfg).map_err(|err| Error::invalid(format!("{}: {err}", e.path.display())))?;
            variants
                .iter()
                .map(|&v| build_feature_vector(&img, &mask, v).map(|f| (f, e.label)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    variants
        .iter()
        .enumerate()
        .map(|(k, &v)| LabeledDataset::new(v, rows.iter().map(|r| r[k].clone()).collect()))
        .collect()
}

/// Seeded split holding out `test_frac` of each class (rounded half up).
/// Both index lists are sorted.
pub fn stratified_split(labels: &[Label], test_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::invalid(format!("test fraction {test_frac} must lie in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        let n_test = crate::imaging::round_half_up(idx.len() as f64 * test_frac) as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draw_spec_respects_class() {
        for seed in 0..40 {
            let s = draw_spec(Label::Unripened, None, seed).unwrap();
            assert!(s.spots.is_empty() && s.subclass.is_none());
            let s = draw_spec(Label::Ripened, Some(Subclass::WellRipened), seed).unwrap();
            assert!(s.spots.len() > 5);
            let s = draw_spec(Label::Ripened, None, seed).unwrap();
            assert_eq!(s.spots.len() > 5, s.subclass == Some(Subclass::WellRipened));
        }
        assert!(draw_spec(Label::Overripened, Some(Subclass::MidRipened), 0).is_err());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<Label> = (0..103).map(|i| Label::ALL[i % 3]).collect();
        let (train, test) = stratified_split(&labels, 0.2, 4).unwrap();
        assert_eq!(train.len() + test.len(), 103);
        assert!(train.iter().all(|i| !test.contains(i)));
        // 35, 34, 34 per class → 7 held out each
        assert_eq!(test.len(), 21);
        assert_eq!(stratified_split(&labels, 0.2, 4).unwrap(), (train, test));
        assert!(stratified_split(&labels, 1.0, 4).is_err());
    }

    #[test]
    fn small_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let plan = CorpusPlan {
            originals_per_class: 2,
            augment: AugmentPlan { rotation: 2, flipping: 1, shifting: 1 },
            synthetic: 2,
        };
        let (m, truths) = build_corpus(dir.path(), &plan, 3, &AugmentConfig::default()).unwrap();
        assert_eq!(m.len(), plan.total());
        assert_eq!(truths.len(), 8);
        m.check_files().unwrap();
        assert_eq!(m.counts_by_tag()[&Tag::Synthetic], 2);
        let ds = extract_datasets(&m, &[Variant::A, Variant::B], &SegmentConfig::default()).unwrap();
        assert_eq!((ds[0].len(), ds[0].dim(), ds[1].dim()), (12, 258, 2));
        for (a, b) in ds[0].features().iter().zip(ds[1].features()) {
            assert_eq!(&a[..2], &b[..]);
        }
    }
}
