//! Label-preserving dataset enlargement and JSON-lines manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::Label;
use crate::detection::Subclass;
use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, RgbImage};

const BLACK: [u8; 3] = [0, 0, 0];

/// Clockwise rotation. Multiples of 90° permute pixels exactly (quarter
/// turns swap width and height); any other angle resamples with nearest
/// neighbour into a same-size canvas filled black.
pub fn rotate(img: &RgbImage, angle: f64) -> RgbImage {
    let turns = angle / 90.0;
    if turns.fract() == 0.0 {
        return match (turns as i64).rem_euclid(4) {
            0 => img.clone(),
            1 => quarter_turn(img),
            2 => flip(&flip(img, Axis::Horizontal), Axis::Vertical),
            _ => quarter_turn(&flip(&flip(img, Axis::Horizontal), Axis::Vertical)),
        };
    }
    let (w, h) = img.dims();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = angle.to_radians().sin_cos();
    RgbImage::from_fn(w, h, |x, y| {
        // Inverse map: rotate the destination centre counter-clockwise.
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let sx = (c * dx + s * dy + cx).floor();
        let sy = (-s * dx + c * dy + cy).floor();
        if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
            img.get(sx as u32, sy as u32)
        } else {
            BLACK
        }
    })
    .expect("same dimensions as the source")
}

fn quarter_turn(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dims();
    RgbImage::from_fn(h, w, |x, y| img.get(y, h - 1 - x)).expect("transposed dimensions are valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

pub fn flip(img: &RgbImage, axis: Axis) -> RgbImage {
    let (w, h) = img.dims();
    RgbImage::from_fn(w, h, |x, y| match axis {
        Axis::Horizontal => img.get(w - 1 - x, y),
        Axis::Vertical => img.get(x, h - 1 - y),
    })
    .expect("same dimensions as the source")
}

/// Translates content by `(dx, dy)`; vacated pixels are black.
pub fn shift(img: &RgbImage, dx: i64, dy: i64) -> Result<RgbImage> {
    let (w, h) = img.dims();
    if dx.unsigned_abs() >= w as u64 || dy.unsigned_abs() >= h as u64 {
        return Err(Error::invalid(format!("shift ({dx}, {dy}) must be smaller than the {w}x{h} image")));
    }
    RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
            img.get(sx as u32, sy as u32)
        } else {
            BLACK
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Original,
    Rotation,
    Flipping,
    Shifting,
    Synthetic,
}

impl Tag {
    pub const ALL: [Tag; 5] = [Tag::Original, Tag::Rotation, Tag::Flipping, Tag::Shifting, Tag::Synthetic];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Original => "original",
            Tag::Rotation => "rotation",
            Tag::Flipping => "flipping",
            Tag::Shifting => "shifting",
            Tag::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub tag: Tag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subclass: Option<Subclass>,
}

/// Ordered list of labelled images with unique paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(Error::invalid(format!("duplicate manifest path {}", e.path.display())));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts_by_tag(&self) -> BTreeMap<Tag, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.tag).or_default() += 1;
        }
        out
    }

    pub fn counts_by_label(&self) -> BTreeMap<Label, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.label).or_default() += 1;
        }
        out
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialise"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::invalid(format!("manifest line {}: {err}", n + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    /// Relative paths are resolved against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        let mut m = Self::from_jsonl(&text)?;
        if let Some(dir) = path.parent() {
            for e in &mut m.entries {
                if e.path.is_relative() {
                    e.path = dir.join(&e.path);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Errors on the first entry whose file is missing.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            if !e.path.is_file() {
                return Err(Error::io(
                    &e.path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry has no file"),
                ));
            }
        }
        Ok(())
    }
}

/// Number of new images to produce per transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPlan {
    pub rotation: usize,
    pub flipping: usize,
    pub shifting: usize,
}

impl AugmentPlan {
    pub fn total(&self) -> usize {
        self.rotation + self.flipping + self.shifting
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation angles are uniform in `[-max_angle, max_angle]` degrees.
    pub max_angle: f64,
    /// Shifts are at most this fraction of the width/height.
    pub max_shift_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_angle: 25.0,
            max_shift_frac: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Transform {
    Rotate(f64),
    Flip(Axis),
    Shift(f64, f64),
}

impl Transform {
    fn apply(self, img: &RgbImage) -> Result<RgbImage> {
        match self {
            Transform::Rotate(a) => Ok(rotate(img, a)),
            Transform::Flip(axis) => Ok(flip(img, axis)),
            Transform::Shift(fx, fy) => {
                let (w, h) = img.dims();
                let dx = (fx * w as f64).round() as i64;
                let dy = (fy * h as f64).round() as i64;
                shift(img, dx.clamp(1 - w as i64, w as i64 - 1), dy.clamp(1 - h as i64, h as i64 - 1))
            }
        }
    }
}

/// Samples sources uniformly, draws transform parameters from `seed`, and
/// writes `<out_dir>/<tag>_<n>.png`. All random draws happen before any
/// file is written, so the result does not depend on write order.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    plan: &AugmentPlan,
    seed: u64,
    out_dir: impl AsRef<Path>,
    cfg: &AugmentConfig,
) -> Result<DatasetManifest> {
    if plan.total() == 0 {
        return Ok(manifest.clone());
    }
    if manifest.is_empty() {
        return Err(Error::invalid("cannot augment an empty manifest"));
    }
    if !(cfg.max_angle >= 0.0) || !(0.0..1.0).contains(&cfg.max_shift_frac) {
        return Err(Error::invalid("max_angle must be ≥ 0 and max_shift_frac in [0, 1)"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(plan.total());
    for (tag, n) in [(Tag::Rotation, plan.rotation), (Tag::Flipping, plan.flipping), (Tag::Shifting, plan.shifting)] {
        for i in 0..n {
            let src = rng.random_range(0..manifest.len());
            let t = match tag {
                Tag::Rotation => Transform::Rotate(rng.random_range(-cfg.max_angle..=cfg.max_angle)),
                Tag::Flipping => Transform::Flip(if rng.random_bool(0.5) { Axis::Horizontal } else { Axis::Vertical }),
                _ => {
                    let m = cfg.max_shift_frac;
                    Transform::Shift(rng.random_range(-m..=m), rng.random_range(-m..=m))
                }
            };
            jobs.push((tag, i, src, t));
        }
    }

    let new_entries = jobs
        .par_iter()
        .map(|&(tag, i, src, t)| {
            let source = &manifest.entries[src];
            let img = load_image(&source.path)?;
            let path = out_dir.join(format!("{tag}_{i:05}.png"));
            save_image(&t.apply(&img)?, &path)?;
            Ok(ManifestEntry {
                path,
                label: source.label,
                tag,
                subclass: source.subclass,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = manifest.entries.clone();
    entries.extend(new_entries);
    DatasetManifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [x as u8 + 1, y as u8 + 1, (x * 7 + y * 3) as u8]).unwrap()
    }

    fn sorted_pixels(i: &RgbImage) -> Vec<[u8; 3]> {
        let mut p = i.pixels().to_vec();
        p.sort();
        p
    }

    #[test]
    fn quarter_turn_is_clockwise() {
        let (a, b) = ([1, 1, 1], [2, 2, 2]);
        let row = RgbImage::new(2, 1, vec![a, b]).unwrap();
        let r = rotate(&row, 90.0);
        assert_eq!(r.dims(), (1, 2));
        assert_eq!(r.pixels(), &[a, b]);
        // Counter-clockwise puts the right pixel on top.
        assert_eq!(rotate(&row, -90.0).pixels(), &[b, a]);
    }

    #[test]
    fn rotation_identities() {
        let i = img(5, 3);
        assert_eq!(rotate(&i, 360.0), i);
        assert_eq!(rotate(&rotate(&i, 180.0), 180.0), i);
        let mut r = i.clone();
        for _ in 0..4 {
            r = rotate(&r, 90.0);
        }
        assert_eq!(r, i);
        assert_eq!(rotate(&i, 270.0), rotate(&rotate(&rotate(&i, 90.0), 90.0), 90.0));
        for a in [90.0, 180.0, 270.0] {
            assert_eq!(sorted_pixels(&rotate(&i, a)), sorted_pixels(&i));
        }
    }

    #[test]
    fn arbitrary_rotation_keeps_size_and_fills_black() {
        let i = RgbImage::filled(20, 10, [9, 9, 9]).unwrap();
        let r = rotate(&i, 30.0);
        assert_eq!(r.dims(), (20, 10));
        assert_eq!(r.get(0, 0), BLACK);
        assert_eq!(r.get(10, 5), [9, 9, 9]);
        // Nearest neighbour never invents colours.
        let j = img(9, 7);
        let colours: HashSet<[u8; 3]> = j.pixels().iter().copied().chain([BLACK]).collect();
        assert!(rotate(&j, 17.0).pixels().iter().all(|p| colours.contains(p)));
    }

    #[test]
    fn flip_identities() {
        let i = img(4, 3);
        assert_eq!(flip(&flip(&i, Axis::Horizontal), Axis::Horizontal), i);
        assert_eq!(flip(&flip(&i, Axis::Vertical), Axis::Vertical), i);
        assert_eq!(flip(&flip(&i, Axis::Horizontal), Axis::Vertical), rotate(&i, 180.0));
        let row = RgbImage::new(2, 1, vec![[1, 1, 1], [2, 2, 2]]).unwrap();
        assert_eq!(flip(&row, Axis::Horizontal).pixels(), &[[2, 2, 2], [1, 1, 1]]);
    }

    #[test]
    fn shift_cases() {
        let i = img(4, 3);
        assert_eq!(shift(&i, 0, 0).unwrap(), i);
        let row = RgbImage::new(2, 1, vec![[1, 1, 1], [2, 2, 2]]).unwrap();
        assert_eq!(shift(&row, 1, 0).unwrap().pixels(), &[BLACK, [1, 1, 1]]);
        assert_ne!(shift(&shift(&i, 1, 1).unwrap(), -1, -1).unwrap(), i);
        assert!(shift(&i, 4, 0).is_err());
        assert!(shift(&i, 0, -3).is_err());
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let m = DatasetManifest::new(vec![
            ManifestEntry { path: "a.png".into(), label: Label::Ripened, tag: Tag::Synthetic, subclass: Some(Subclass::WellRipened) },
            ManifestEntry { path: "b.png".into(), label: Label::Unripened, tag: Tag::Original, subclass: None },
        ])
        .unwrap();
        let text = m.to_jsonl();
        assert_eq!(text.lines().next().unwrap(), r#"{"path":"a.png","label":"Ripened","tag":"synthetic","subclass":"WellRipened"}"#);
        assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
        assert!(DatasetManifest::from_jsonl("{\"path\":1}").is_err());
        let dup = format!("{}{}", text.lines().next().unwrap(), "\n").repeat(2);
        assert!(DatasetManifest::from_jsonl(&dup).is_err());
    }

    fn originals(dir: &Path, n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| {
                let path = dir.join(format!("orig_{i}.png"));
                save_image(&img(6 + i as u32, 5), &path).unwrap();
                ManifestEntry { path, label: Label::ALL[i % 3], tag: Tag::Original, subclass: None }
            })
            .collect();
        DatasetManifest::new(entries).unwrap()
    }

    #[test]
    fn augment_follows_plan_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = originals(dir.path(), 6);
        let plan = AugmentPlan { rotation: 5, flipping: 4, shifting: 3 };
        let a = augment_dataset(&m, &plan, 42, dir.path().join("a"), &AugmentConfig::default()).unwrap();
        let counts = a.counts_by_tag();
        assert_eq!(counts[&Tag::Original], 6);
        assert_eq!(counts[&Tag::Rotation], 5);
        assert_eq!(counts[&Tag::Flipping], 4);
        assert_eq!(counts[&Tag::Shifting], 3);
        a.check_files().unwrap();
        let b = augment_dataset(&m, &plan, 42, dir.path().join("a"), &AugmentConfig::default()).unwrap();
        assert_eq!(a, b);
        // Every transform keeps the size, and each original has its own
        // width, so the width identifies the source.
        for e in &a.entries()[6..] {
            let w = load_image(&e.path).unwrap().width();
            assert_eq!(m.entries()[(w - 6) as usize].label, e.label);
        }
        assert_eq!(augment_dataset(&m, &AugmentPlan::default(), 1, dir.path().join("z"), &AugmentConfig::default()).unwrap(), m);
    }
}
