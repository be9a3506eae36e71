//! Foreground extraction: K-means over filtered pixel colours, background
//! chosen by border majority, then largest-component cleanup.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::connected_components;
use crate::error::{Error, Result};
use crate::imaging::{self, GrayImage, RgbImage};

/// Row-major binary raster, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "{} mask bits for a {width}x{height} raster",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn iou(&self, other: &Mask) -> Result<f64> {
        ensure_dims(self.dims(), other.dims())?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Square dilation with the given radius (Chebyshev distance).
    pub fn dilate(&self, radius: u32) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as i64, self.height as i64);
        let r = radius as i64;
        // Separable: horizontal then vertical max.
        let mut tmp = vec![false; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                let lo = (x - r).max(0);
                let hi = (x + r).min(w - 1);
                tmp[(y * w + x) as usize] = (lo..=hi).any(|sx| self.bits[(y * w + sx) as usize]);
            }
        }
        let mut bits = vec![false; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                let lo = (y - r).max(0);
                let hi = (y + r).min(h - 1);
                bits[(y * w + x) as usize] = (lo..=hi).any(|sy| tmp[(sy * w + x) as usize]);
            }
        }
        Mask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    /// Sets every background pixel that is not 4-connected to the image
    /// border.
    pub fn fill_holes(&self) -> Mask {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut outside = vec![false; self.bits.len()];
        let mut queue = VecDeque::new();
        let seed = |idx: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
            if !self.bits[idx] && !outside[idx] {
                outside[idx] = true;
                queue.push_back(idx);
            }
        };
        for x in 0..w {
            seed(x, &mut outside, &mut queue);
            seed((h - 1) * w + x, &mut outside, &mut queue);
        }
        for y in 0..h {
            seed(y * w, &mut outside, &mut queue);
            seed(y * w + w - 1, &mut outside, &mut queue);
        }
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            if x > 0 {
                seed(idx - 1, &mut outside, &mut queue);
            }
            if x + 1 < w {
                seed(idx + 1, &mut outside, &mut queue);
            }
            if y > 0 {
                seed(idx - w, &mut outside, &mut queue);
            }
            if y + 1 < h {
                seed(idx + w, &mut outside, &mut queue);
            }
        }
        Mask {
            width: self.width,
            height: self.height,
            bits: outside.into_iter().map(|o| !o).collect(),
        }
    }

    /// 0/255 grayscale rendering, e.g. for writing as PNG.
    pub fn to_gray(&self) -> GrayImage {
        let px = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::new(self.width, self.height, px).expect("mask dims are valid")
    }

    /// Pixels >= 128 are foreground.
    pub fn from_gray(img: &GrayImage) -> Mask {
        Mask {
            width: img.width(),
            height: img.height(),
            bits: img.pixels().iter().map(|&v| v >= 128).collect(),
        }
    }

    pub fn to_png(&self) -> Vec<u8> {
        imaging::encode_gray_png(&self.to_gray())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Mask> {
        Ok(Mask::from_gray(&imaging::decode_gray_png(bytes)?))
    }
}

pub(crate) fn ensure_dims(expected: (u32, u32), actual: (u32, u32)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
    /// Independent restarts; the lowest-WCSS run wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
            seed: 0,
            n_init: 1,
        }
    }
}

/// Result of a K-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    /// WCSS after each Lloyd iteration of the winning run.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn has_at_least_distinct<P: AsRef<[f64]>>(points: &[P], k: usize) -> bool {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for p in points {
        seen.insert(p.as_ref().iter().map(|v| v.to_bits()).collect());
        if seen.len() >= k {
            return true;
        }
    }
    false
}

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, cfg: &KMeansConfig) -> Result<ClusterModel> {
    if points.is_empty() {
        return Err(Error::invalid("k-means on an empty point set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::invalid("points have mixed dimensionality"));
    }
    if !has_at_least_distinct(points, k) {
        return Err(Error::Degenerate(format!(
            "k = {k} exceeds the number of distinct points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..cfg.n_init.max(1) {
        let run = lloyd(points, k, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

fn seed_plus_plus<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p.as_ref(), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        // Points already chosen have zero weight, so a distinct point is
        // always drawn while `total > 0`.
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        let chosen = points[pick.expect("distinct points remain")].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &chosen));
        }
        centroids.push(chosen);
    }
    centroids
}

fn lloyd<P: AsRef<[f64]>>(points: &[P], k: usize, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> ClusterModel {
    let n = points.len();
    let dim = points[0].as_ref().len();
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..cfg.max_iter.max(1) {
        iterations += 1;
        // Assignment: keep the current cluster on exact ties so the
        // objective can only go down.
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let p = p.as_ref();
            let cur = assignments[i];
            let mut best = cur;
            let mut best_d = if cur < k { sq_dist(p, &centroids[cur]) } else { f64::INFINITY };
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best != cur {
                assignments[i] = best;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster: move it onto the point worst served by
                // its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points[a].as_ref(), &centroids[assignments[a]]);
                        let db = sq_dist(points[b].as_ref(), &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                let target = points[far].as_ref().to_vec();
                shift = shift.max(sq_dist(&target, &centroids[c]).sqrt());
                centroids[c] = target;
                changed = true;
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        history.push(wcss(points, &centroids, &assignments));
        if !changed || shift < cfg.tol {
            break;
        }
    }
    ClusterModel {
        k,
        wcss: *history.last().expect("at least one iteration"),
        centroids,
        assignments,
        wcss_history: history,
        iterations,
    }
}

fn wcss<P: AsRef<[f64]>>(points: &[P], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p.as_ref(), &centroids[a]))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub k: usize,
    pub rank_window: u32,
    /// `None` selects the median of the window.
    pub rank: Option<u32>,
    pub log_transform: bool,
    pub fill_holes: bool,
    /// Pure black pixels are known background (the fill left by rotation
    /// and shifting) and take no part in clustering.
    pub black_is_void: bool,
    pub kmeans: KMeansConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            k: 2,
            rank_window: 3,
            rank: None,
            log_transform: true,
            fill_holes: true,
            black_is_void: true,
            kmeans: KMeansConfig {
                max_iter: 50,
                tol: 1e-3,
                seed: 7,
                n_init: 3,
            },
        }
    }
}

/// Applies the rank filter and (optionally) the log transform per channel.
pub fn preprocess(img: &RgbImage, cfg: &SegmentConfig) -> Result<RgbImage> {
    let rank = cfg.rank.unwrap_or(cfg.rank_window * cfg.rank_window / 2);
    let [r, g, b] = img.channels();
    let filter = |c: &GrayImage| -> Result<GrayImage> {
        let f = imaging::rank_filter(c, cfg.rank_window, rank)?;
        Ok(if cfg.log_transform { imaging::log_transform(&f) } else { f })
    };
    RgbImage::from_channels(&filter(&r)?, &filter(&g)?, &filter(&b)?)
}

/// Separates the fruit from the background.
///
/// The cluster owning most border pixels is background; every other cluster
/// is foreground. Only the largest 4-connected foreground component is kept,
/// optionally with its interior holes filled (dark peel spots can fall into
/// the background cluster).
pub fn segment(img: &RgbImage, cfg: &SegmentConfig) -> Result<Mask> {
    let filtered = preprocess(img, cfg)?;
    let (w, h) = img.dims();
    let void: Vec<bool> = img.pixels().iter().map(|p| cfg.black_is_void && *p == [0, 0, 0]).collect();
    let live: Vec<usize> = (0..void.len()).filter(|&i| !void[i]).collect();
    if live.is_empty() {
        return Err(Error::Degenerate("image is entirely black".into()));
    }
    let points: Vec<[f64; 3]> = live
        .iter()
        .map(|&i| filtered.pixels()[i].map(f64::from))
        .collect();
    let model = kmeans(&points, cfg.k, &cfg.kmeans)?;
    let mut cluster = vec![None; void.len()];
    for (&i, &a) in live.iter().zip(&model.assignments) {
        cluster[i] = Some(a);
    }

    let mut border_votes = vec![0usize; model.k];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                if let Some(a) = cluster[(y * w + x) as usize] {
                    border_votes[a] += 1;
                }
            }
        }
    }
    // A fully black border means the background was already removed.
    let background = border_votes
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);

    let raw = Mask::new(w, h, cluster.iter().map(|c| c.is_some() && *c != background).collect())?;
    let largest = connected_components(&raw)
        .into_iter()
        .max_by(|a, b| a.area.cmp(&b.area).then(b.first_index.cmp(&a.first_index)))
        .ok_or_else(|| Error::Degenerate("segmentation produced no foreground".into()))?;
    let mut mask = Mask::filled(w, h, false);
    for &(x, y) in &largest.pixels {
        mask.set(x, y, true);
    }
    Ok(if cfg.fill_holes { mask.fill_holes() } else { mask })
}

/// Zeroes every background pixel.
pub fn apply_mask(img: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    ensure_dims(img.dims(), mask.dims())?;
    let mut out = img.clone();
    for (px, &keep) in out.pixels_mut().iter_mut().zip(mask.bits()) {
        if !keep {
            *px = [0, 0, 0];
        }
    }
    Ok(out)
}
