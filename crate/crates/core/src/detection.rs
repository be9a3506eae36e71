//! Second-layer defect localisation.
//!
//! A [`Detector`] turns a segmented fruit into defect boxes. The bundled
//! [`SpotDetector`] is a deterministic colour/region baseline: dark brown
//! peel pixels are grouped into spots, and the spot count decides between
//! mid- and well-ripened via [`ripeness_subclass`].

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::rgb_to_hsv;
use crate::imaging::RgbImage;
use crate::segmentation::{ensure_dims, Mask};

/// Axis-aligned box: top-left corner plus size, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("box must have positive size, got {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    /// From corner coordinates with exclusive `x2`/`y2`.
    pub fn from_corners(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::invalid(format!("degenerate corners ({x1},{y1})-({x2},{y2})")));
        }
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Option<BBox> {
        let x = u32::try_from(self.x as i64 + dx).ok()?;
        let y = u32::try_from(self.y as i64 + dy).ok()?;
        Some(BBox { x, y, ..*self })
    }
}

/// Box as found in ground-truth files: either `{x, y, w, h}` or corner form
/// `{x1, y1, x2, y2}` with exclusive `x2`/`y2`. Extra fields are ignored.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(untagged)]
enum BoxRecord {
    Size { x: u32, y: u32, w: u32, h: u32 },
    Corners { x1: u32, y1: u32, x2: u32, y2: u32 },
}

impl BoxRecord {
    fn into_bbox(self) -> Result<BBox> {
        match self {
            BoxRecord::Size { x, y, w, h } => BBox::new(x, y, w, h),
            BoxRecord::Corners { x1, y1, x2, y2 } => BBox::from_corners(x1, y1, x2, y2),
        }
    }
}

/// Parses a JSON array of boxes in either accepted form.
pub fn parse_boxes(json: &str) -> Result<Vec<BBox>> {
    let records: Vec<BoxRecord> =
        serde_json::from_str(json).map_err(|e| Error::invalid(format!("bad box list: {e}")))?;
    records.into_iter().map(BoxRecord::into_bbox).collect()
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.right().min(b.right()).saturating_sub(a.x.max(b.x) as u64);
    let iy = a.bottom().min(b.bottom()).saturating_sub(a.y.max(b.y) as u64);
    let inter = ix * iy;
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

pub const DEFECT_CLASS: &str = "defect";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_tag: String,
}

impl Detection {
    pub fn defect(bbox: BBox, score: f64) -> Self {
        Self {
            bbox,
            score,
            class_tag: DEFECT_CLASS.to_string(),
        }
    }
}

/// A 4-connected foreground region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub pixels: Vec<(u32, u32)>,
    pub area: usize,
    pub bbox: BBox,
    /// Row-major index of the first pixel met while scanning.
    pub first_index: usize,
}

/// Labels 4-connected foreground regions, ordered by the (top, left) corner
/// of their bounding boxes.
pub fn connected_components(mask: &Mask) -> Vec<Region> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let bits = mask.bits();
    let mut seen = vec![false; bits.len()];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x as u32, y as u32));
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |n: usize| {
                if bits[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
        regions.push(Region {
            area: pixels.len(),
            pixels,
            bbox: BBox {
                x: x0 as u32,
                y: y0 as u32,
                w: (x1 - x0 + 1) as u32,
                h: (y1 - y0 + 1) as u32,
            },
            first_index: start,
        });
    }
    regions.sort_by_key(|r| (r.bbox.y, r.bbox.x, r.first_index));
    regions
}

/// Pluggable second-layer detector. Implementations must return boxes
/// inside the image and scores in `[0, 1]`.
pub trait Detector: Send + Sync {
    fn detect(&self, img: &RgbImage, fruit: &Mask) -> Result<Vec<Detection>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpotDetectorConfig {
    /// Inclusive hue band in degrees.
    pub hue_min: f64,
    pub hue_max: f64,
    /// Spot pixels must be at most this bright.
    pub max_value: f64,
    pub min_area: usize,
    /// Spots closer than this many pixels are merged.
    pub merge_gap: u32,
}

impl Default for SpotDetectorConfig {
    fn default() -> Self {
        Self {
            hue_min: 10.0,
            hue_max: 40.0,
            max_value: 0.55,
            min_area: 25,
            merge_gap: 2,
        }
    }
}

impl SpotDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let band_ok = (0.0..360.0).contains(&self.hue_min)
            && (0.0..360.0).contains(&self.hue_max)
            && self.hue_min <= self.hue_max;
        if !band_ok {
            return Err(Error::invalid(format!(
                "hue band [{}, {}] must lie within [0, 360)",
                self.hue_min, self.hue_max
            )));
        }
        if !(0.0..=1.0).contains(&self.max_value) {
            return Err(Error::invalid("max_value must be within [0, 1]"));
        }
        if self.min_area == 0 {
            return Err(Error::invalid("min_area must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct SpotDetector {
    cfg: SpotDetectorConfig,
}

impl SpotDetector {
    pub fn new(cfg: SpotDetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SpotDetectorConfig {
        &self.cfg
    }
}

impl Detector for SpotDetector {
    fn detect(&self, img: &RgbImage, fruit: &Mask) -> Result<Vec<Detection>> {
        detect_spots(img, fruit, &self.cfg)
    }
}

/// Finds dark brown spots inside the fruit.
///
/// Spot pixels are grouped by connectivity after dilating by the merge gap,
/// but each detection's area and box are measured on the undilated pixels.
/// Score is `min(1, area / (4·min_area))`.
pub fn detect_spots(img: &RgbImage, fruit: &Mask, cfg: &SpotDetectorConfig) -> Result<Vec<Detection>> {
    ensure_dims(img.dims(), fruit.dims())?;
    let (w, h) = img.dims();
    let spot_bits: Vec<bool> = img
        .pixels()
        .iter()
        .zip(fruit.bits())
        .map(|(&[r, g, b], &inside)| {
            if !inside {
                return false;
            }
            let hsv = rgb_to_hsv(r, g, b);
            hsv.h >= cfg.hue_min && hsv.h <= cfg.hue_max && hsv.v <= cfg.max_value
        })
        .collect();
    let spots = Mask::new(w, h, spot_bits)?;
    let grouped = spots.dilate(cfg.merge_gap);

    let mut detections = Vec::new();
    for region in connected_components(&grouped) {
        let own: Vec<(u32, u32)> = region.pixels.iter().copied().filter(|&(x, y)| spots.get(x, y)).collect();
        if own.len() < cfg.min_area {
            continue;
        }
        let x0 = own.iter().map(|p| p.0).min().expect("non-empty");
        let x1 = own.iter().map(|p| p.0).max().expect("non-empty");
        let y0 = own.iter().map(|p| p.1).min().expect("non-empty");
        let y1 = own.iter().map(|p| p.1).max().expect("non-empty");
        let score = (own.len() as f64 / (4.0 * cfg.min_area as f64)).min(1.0);
        detections.push(Detection::defect(
            BBox {
                x: x0,
                y: y0,
                w: x1 - x0 + 1,
                h: y1 - y0 + 1,
            },
            score,
        ));
    }
    Ok(detections)
}

/// Second-layer grade of a ripened fruit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subclass {
    MidRipened,
    WellRipened,
}

impl Subclass {
    pub const ALL: [Subclass; 2] = [Subclass::MidRipened, Subclass::WellRipened];

    pub fn name(self) -> &'static str {
        match self {
            Subclass::MidRipened => "MidRipened",
            Subclass::WellRipened => "WellRipened",
        }
    }
}

impl fmt::Display for Subclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Subclass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "midripened" | "mid" => Ok(Subclass::MidRipened),
            "wellripened" | "well" => Ok(Subclass::WellRipened),
            _ => Err(Error::invalid(format!("unknown subclass {s:?}"))),
        }
    }
}

/// More than this many defect regions makes a fruit well-ripened.
pub const MAX_MID_RIPENED_DEFECTS: usize = 5;

pub fn ripeness_subclass(detections: &[Detection]) -> Subclass {
    if detections.len() <= MAX_MID_RIPENED_DEFECTS {
        Subclass::MidRipened
    } else {
        Subclass::WellRipened
    }
}
