//! Synthetic banana images with exact ground truth.
//!
//! The fruit is a crescent: a body ellipse with an offset ellipse cut out of
//! it. Peel colours are drawn from the per-class hue/saturation/value bands,
//! ripeness spots are dark brown ellipses placed strictly inside the peel.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::Label;
use crate::detection::{BBox, SpotDetectorConfig, Subclass, MAX_MID_RIPENED_DEFECTS};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::segmentation::Mask;

pub const DEFAULT_WIDTH: u32 = 128;
pub const DEFAULT_HEIGHT: u32 = 96;

/// Smallest spot semi-axis; keeps every spot above the detector's
/// default minimum area.
pub const MIN_SPOT_AXIS: f64 = 3.5;

/// Peel hue bands in degrees, by class.
pub fn hue_band(label: Label) -> (f64, f64) {
    match label {
        Label::Unripened => (72.0, 78.0),
        Label::Ripened => (39.0, 72.0),
        Label::Overripened => (10.0, 40.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Clockwise rotation in degrees.
    pub angle: f64,
}

impl Ellipse {
    /// Tests the pixel centre `(x + 0.5, y + 0.5)`.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.contains_grown(x, y, 0.0)
    }

    /// As [`contains`](Self::contains) with both semi-axes grown by `margin`.
    pub fn contains_grown(&self, x: u32, y: u32, margin: f64) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = (self.angle * PI / 180.0).sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a, b) = (self.rx + margin, self.ry + margin);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }

    /// Pixel range that can contain points of the grown ellipse.
    fn pixel_bounds(&self, margin: f64, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let r = self.rx.max(self.ry) + margin + 1.0;
        let clamp = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
        (
            clamp(self.cx - r, width),
            clamp(self.cy - r, height),
            clamp(self.cx + r + 1.0, width),
            clamp(self.cy + r + 1.0, height),
        )
    }
}

/// Colour given as HSI-style hue and saturation plus `V = max/255`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeelColor {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
}

impl PeelColor {
    /// Inverts the hue/saturation conversion at unit intensity, then scales
    /// so the brightest channel equals `value · 255`.
    pub fn to_rgb(&self) -> [u8; 3] {
        let s = self.saturation.clamp(0.0, 1.0);
        let h = self.hue.rem_euclid(360.0);
        let sector = |h: f64| {
            let r = h * PI / 180.0;
            let lo = 1.0 - s;
            let hi = 1.0 + s * r.cos() / (PI / 3.0 - r).cos();
            (hi, 3.0 - hi - lo, lo)
        };
        let (r, g, b) = if h < 120.0 {
            sector(h)
        } else if h < 240.0 {
            let (hi, mid, lo) = sector(h - 120.0);
            (lo, hi, mid)
        } else {
            let (hi, mid, lo) = sector(h - 240.0);
            (mid, lo, hi)
        };
        let scale = self.value.clamp(0.0, 1.0) * 255.0 / r.max(g).max(b);
        [r, g, b].map(|c| crate::imaging::round_half_up(c * scale).clamp(0.0, 255.0) as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: u32,
    pub height: u32,
    pub label: Label,
    /// Present exactly for ripened fruit.
    pub subclass: Option<Subclass>,
    pub peel: PeelColor,
    pub spot_color: PeelColor,
    pub background: [u8; 3],
    pub body: Ellipse,
    /// Region removed from the body to leave a crescent.
    pub cut: Ellipse,
    pub spots: Vec<Ellipse>,
    /// Per-channel uniform noise in `[-noise, noise]`.
    pub noise: u8,
    pub seed: u64,
}

/// Spots keep this far from the peel edge.
const EDGE_MARGIN: f64 = 1.5;
const PLACEMENT_ATTEMPTS: usize = 2000;
const PLACEMENT_RESTARTS: usize = 50;

impl SyntheticSpec {
    /// Random spec of the given class; `spot_count` spots for ripened
    /// (which also fixes the subclass) and over-ripened fruit.
    pub fn random(label: Label, spot_count: usize, seed: u64) -> Result<Self> {
        Self::random_sized(label, spot_count, seed, DEFAULT_WIDTH, DEFAULT_HEIGHT)
    }

    pub fn random_sized(label: Label, spot_count: usize, seed: u64, width: u32, height: u32) -> Result<Self> {
        if width < 32 || height < 32 {
            return Err(Error::invalid(format!("synthetic images need at least 32x32, got {width}x{height}")));
        }
        if label == Label::Unripened && spot_count > 0 {
            return Err(Error::invalid("unripened fruit carries no spots"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let scale = rng.random_range(0.92..1.05);
        let angle = rng.random_range(-12.0..12.0);
        let body = Ellipse {
            cx: w * (0.5 + rng.random_range(-0.03..0.03)),
            cy: h * (0.42 + rng.random_range(-0.03..0.03)),
            rx: w * 0.40 * scale,
            ry: h * 0.36 * scale,
            angle,
        };
        let offset = body.ry * rng.random_range(0.52..0.6);
        let (s, c) = (angle * PI / 180.0).sin_cos();
        let cut = Ellipse {
            cx: body.cx + offset * s,
            cy: body.cy - offset * c,
            rx: body.rx * 1.04,
            ry: body.ry * 0.8,
            angle,
        };
        let (lo, hi) = match label {
            Label::Unripened => (74.0, 76.0),
            Label::Ripened => (42.0, 68.0),
            Label::Overripened => (15.0, 35.0),
        };
        let peel = match label {
            Label::Unripened => PeelColor {
                hue: rng.random_range(lo..hi),
                saturation: rng.random_range(0.85..0.95),
                value: rng.random_range(0.35..0.5),
            },
            Label::Ripened => PeelColor {
                hue: rng.random_range(lo..hi),
                saturation: rng.random_range(0.75..0.95),
                value: rng.random_range(0.75..0.95),
            },
            Label::Overripened => PeelColor {
                hue: rng.random_range(lo..hi),
                saturation: rng.random_range(0.55..0.8),
                value: rng.random_range(0.3..0.5),
            },
        };
        let spot_color = PeelColor {
            hue: rng.random_range(18.0..32.0),
            saturation: rng.random_range(0.6..0.8),
            value: if label == Label::Overripened {
                rng.random_range(0.2..0.28)
            } else {
                rng.random_range(0.33..0.48)
            },
        };
        let background = [150u8, 170, 205].map(|v| (v as i32 + rng.random_range(-10..=10)) as u8);
        let subclass = (label == Label::Ripened).then(|| {
            if spot_count <= MAX_MID_RIPENED_DEFECTS {
                Subclass::MidRipened
            } else {
                Subclass::WellRipened
            }
        });
        let mut spec = SyntheticSpec {
            width,
            height,
            label,
            subclass,
            peel,
            spot_color,
            background,
            body,
            cut,
            spots: Vec::new(),
            noise: 4,
            seed,
        };
        spec.place_spots(spot_count, &mut rng)?;
        spec.validate()?;
        Ok(spec)
    }

    fn place_spots(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let fruit = self.fruit_mask();
        let candidates: Vec<(u32, u32)> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| fruit.get(x, y))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Degenerate("synthetic fruit has no area".into()));
        }
        // Pixels closer than this (Chebyshev) to an existing spot are off
        // limits, so the detector's default merge gap never joins two spots.
        let exclusion = 2 * SpotDetectorConfig::default().merge_gap + 1;
        let mut painted = Mask::filled(self.width, self.height, false);
        let mut forbidden = painted.clone();
        let mut attempts = 0;
        let mut restarts = 0;
        while self.spots.len() < count {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS {
                // Greedy placement can paint itself into a corner; start over.
                restarts += 1;
                if restarts > PLACEMENT_RESTARTS {
                    return Err(Error::Degenerate(format!("could not place {count} spots on the fruit")));
                }
                self.spots.clear();
                painted = Mask::filled(self.width, self.height, false);
                forbidden = painted.clone();
                attempts = 0;
            }
            let (x, y) = candidates[rng.random_range(0..candidates.len())];
            let spot = Ellipse {
                cx: x as f64 + 0.5,
                cy: y as f64 + 0.5,
                rx: rng.random_range(MIN_SPOT_AXIS..4.5),
                ry: rng.random_range(MIN_SPOT_AXIS..4.5),
                angle: rng.random_range(0.0..180.0),
            };
            let (x0, y0, x1, y1) = spot.pixel_bounds(EDGE_MARGIN, self.width, self.height);
            let fits = (y0..y1).all(|py| {
                (x0..x1).all(|px| {
                    let inside_edge = !spot.contains_grown(px, py, EDGE_MARGIN) || fruit.get(px, py);
                    let clear = !spot.contains(px, py) || !forbidden.get(px, py);
                    inside_edge && clear
                })
            });
            if !fits {
                continue;
            }
            for py in y0..y1 {
                for px in x0..x1 {
                    if spot.contains(px, py) {
                        painted.set(px, py, true);
                    }
                }
            }
            forbidden = painted.dilate(exclusion);
            self.spots.push(spot);
        }
        Ok(())
    }

    /// Exact fruit silhouette.
    pub fn fruit_mask(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.body.contains(x, y) && !self.cut.contains(x, y)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("inconsistent synthetic spec: {msg}")));
        let (lo, hi) = hue_band(self.label);
        if !(lo..=hi).contains(&self.peel.hue) {
            return bad(format!("{} peel hue {} outside [{lo}, {hi}]", self.label, self.peel.hue));
        }
        let n = self.spots.len();
        match (self.label, self.subclass) {
            (Label::Unripened, None) if n == 0 => {}
            (Label::Unripened, _) => return bad("unripened fruit must have no spots and no subclass".into()),
            (Label::Ripened, Some(Subclass::MidRipened)) if n <= MAX_MID_RIPENED_DEFECTS => {}
            (Label::Ripened, Some(Subclass::WellRipened)) if n > MAX_MID_RIPENED_DEFECTS => {}
            (Label::Ripened, s) => return bad(format!("ripened subclass {s:?} does not match {n} spots")),
            (Label::Overripened, None) => {}
            (Label::Overripened, Some(_)) => return bad("only ripened fruit has a subclass".into()),
        }
        let fruit = self.fruit_mask();
        if fruit.is_empty() {
            return bad("fruit has no area".into());
        }
        let (w, h) = (self.width, self.height);
        let touches_border = (0..w).any(|x| fruit.get(x, 0) || fruit.get(x, h - 1))
            || (0..h).any(|y| fruit.get(0, y) || fruit.get(w - 1, y));
        if touches_border {
            return bad("fruit touches the image border".into());
        }
        let mut owner: Vec<Option<usize>> = vec![None; (w * h) as usize];
        for (i, spot) in self.spots.iter().enumerate() {
            if spot.rx < MIN_SPOT_AXIS || spot.ry < MIN_SPOT_AXIS {
                return bad(format!("spot {i} is smaller than {MIN_SPOT_AXIS} px"));
            }
            let (x0, y0, x1, y1) = spot.pixel_bounds(0.0, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if !spot.contains(x, y) {
                        continue;
                    }
                    if !fruit.get(x, y) {
                        return bad(format!("spot {i} leaves the fruit"));
                    }
                    let slot = &mut owner[(y * w + x) as usize];
                    if let Some(j) = slot {
                        return bad(format!("spots {j} and {i} overlap"));
                    }
                    *slot = Some(i);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: Label,
    pub subclass: Option<Subclass>,
    /// Tight boxes around the rendered spots, in spec order.
    pub spots: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub image: RgbImage,
    pub truth: GroundTruth,
    pub mask: Mask,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let fruit = spec.fruit_mask();
    let peel = spec.peel.to_rgb();
    let spot = spec.spot_color.to_rgb();
    // Noise uses its own stream so it does not depend on how the spec was built.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let amp = spec.noise as i32;
    let (w, h) = (spec.width, spec.height);
    let mut bounds = vec![(u32::MAX, u32::MAX, 0u32, 0u32); spec.spots.len()];
    let image = RgbImage::from_fn(w, h, |x, y| {
        let base = if !fruit.get(x, y) {
            spec.background
        } else if let Some(i) = spec.spots.iter().position(|s| s.contains(x, y)) {
            let b = &mut bounds[i];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            spot
        } else {
            peel
        };
        base.map(|c| {
            let n = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
            (c as i32 + n).clamp(0, 255) as u8
        })
    })?;
    let spots = bounds
        .iter()
        .map(|&(x0, y0, x1, y1)| BBox::from_corners(x0, y0, x1 + 1, y1 + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Synthetic {
        image,
        truth: GroundTruth {
            label: spec.label,
            subclass: spec.subclass,
            spots,
        },
        mask: fruit,
    })
}

/// Picks a spot count typical for the class: none for unripened, 0..=5 for
/// mid-ripened, 6..=8 for well-ripened and 0..=6 for over-ripened.
pub fn random_spot_count(label: Label, subclass: Option<Subclass>, rng: &mut impl Rng) -> usize {
    match (label, subclass) {
        (Label::Unripened, _) => 0,
        (Label::Ripened, Some(Subclass::WellRipened)) => rng.random_range(6..=8),
        (Label::Ripened, _) => rng.random_range(0..=MAX_MID_RIPENED_DEFECTS),
        (Label::Overripened, _) => rng.random_range(0..=6),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{hv_stats, rgb_to_hsv};

    #[test]
    fn peel_color_round_trips_hue() {
        for hue in [15.0, 30.0, 45.0, 60.0, 75.0, 150.0, 200.0, 300.0] {
            let c = PeelColor { hue, saturation: 0.9, value: 0.8 };
            let [r, g, b] = c.to_rgb();
            let hsv = rgb_to_hsv(r, g, b);
            assert!((hsv.h - hue).abs() < 1.5, "hue {hue} → {}", hsv.h);
            assert!((hsv.v - 0.8).abs() < 0.005);
            assert!((hsv.s - 0.9).abs() < 0.03);
        }
    }

    #[test]
    fn unripened_mean_hue_in_band() {
        for seed in 0..10 {
            let spec = SyntheticSpec::random(Label::Unripened, 0, seed).unwrap();
            let s = generate_synthetic(&spec).unwrap();
            let (h, _) = hv_stats(&s.image, &s.mask).unwrap();
            assert!((72.0..=78.0).contains(&h), "seed {seed}: {h}");
        }
    }

    #[test]
    fn ripened_spots_are_inside_and_boxed() {
        let spec = SyntheticSpec::random(Label::Ripened, 3, 11).unwrap();
        assert_eq!(spec.subclass, Some(Subclass::MidRipened));
        let s = generate_synthetic(&spec).unwrap();
        assert_eq!(s.truth.spots.len(), 3);
        for b in &s.truth.spots {
            for y in b.y..b.y + b.h {
                for x in b.x..b.x + b.w {
                    assert!(s.mask.get(x, y) || !spec.spots.iter().any(|e| e.contains(x, y)));
                }
            }
            assert!(b.area() >= 25);
        }
    }

    #[test]
    fn well_ripened_places_many_spots() {
        for seed in 0..300 {
            let spec = SyntheticSpec::random(Label::Ripened, 8, seed).unwrap();
            assert_eq!(spec.subclass, Some(Subclass::WellRipened));
            assert_eq!(spec.spots.len(), 8);
        }
    }

    #[test]
    fn same_seed_same_image() {
        let a = generate_synthetic(&SyntheticSpec::random(Label::Overripened, 4, 5).unwrap()).unwrap();
        let b = generate_synthetic(&SyntheticSpec::random(Label::Overripened, 4, 5).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec::random(Label::Overripened, 4, 6).unwrap()).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn inconsistent_specs_rejected() {
        assert!(SyntheticSpec::random(Label::Unripened, 2, 0).is_err());
        let mut spec = SyntheticSpec::random(Label::Ripened, 2, 0).unwrap();
        spec.subclass = Some(Subclass::WellRipened);
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = SyntheticSpec::random(Label::Ripened, 2, 0).unwrap();
        spec.spots.push(spec.spots[0]);
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::random(Label::Unripened, 0, 0).unwrap();
        spec.peel.hue = 50.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn crescent_is_not_convex() {
        let spec = SyntheticSpec::random(Label::Ripened, 0, 3).unwrap();
        let mask = spec.fruit_mask();
        // The cut leaves background directly above the lowest fruit point
        // at the body centre.
        let (cx, cy) = (spec.body.cx as u32, spec.body.cy as u32);
        assert!(!mask.get(cx, cy));
        assert!(mask.count() > 1000);
    }
}
