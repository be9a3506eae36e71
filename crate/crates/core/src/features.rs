//! Colour and texture features.
//!
//! Hue follows the geometric (arccos) definition over the RGB cube and is
//! reported in degrees; saturation is `1 - 3·min/(R+G+B)` and value is
//! `max/255`. Texture is the basic 3×3 local binary pattern.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{to_gray, GrayImage, RgbImage};
use crate::segmentation::{apply_mask, ensure_dims, Mask};

pub const LBP_BINS: usize = 256;

/// Neighbour walk used by [`lbp`]: starts top-left and goes clockwise, bit
/// `p` has weight `2^p`. Model files record this tag so a model trained with
/// one ordering is never fed codes computed with another.
pub const LBP_ORDER_TAG: &str = "top-left-clockwise";

const NEIGHBOURS: [(i32, i32); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hsv {
    /// Degrees in `[0, 360)`.
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> Hsv {
    let (rf, gf, bf) = (r as f64, g as f64, b as f64);
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let sum = rf + gf + bf;

    let v = max / 255.0;
    let s = if sum == 0.0 { 0.0 } else { 1.0 - 3.0 * min / sum };

    let num = (rf - gf) + (rf - bf);
    let den = 2.0 * ((rf - gf) * (rf - gf) + (rf - bf) * (gf - bf)).sqrt();
    let h = if s == 0.0 || den == 0.0 {
        0.0
    } else {
        let theta = (num / den).clamp(-1.0, 1.0).acos().to_degrees();
        let h = if gf >= bf { theta } else { 360.0 - theta };
        if h >= 360.0 {
            h - 360.0
        } else {
            h
        }
    };
    Hsv { h, s, v }
}

/// Per-pixel LBP codes over the interior of a grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LbpMap {
    /// `source width - 2`.
    pub width: u32,
    /// `source height - 2`.
    pub height: u32,
    pub codes: Vec<u8>,
}

impl LbpMap {
    /// Code of the source pixel `(x, y)`; both must be interior.
    pub fn code_at_source(&self, x: u32, y: u32) -> u8 {
        self.codes[(y - 1) as usize * self.width as usize + (x - 1) as usize]
    }

    pub fn source_dims(&self) -> (u32, u32) {
        (self.width + 2, self.height + 2)
    }
}

pub fn lbp(img: &GrayImage) -> Result<LbpMap> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Err(Error::invalid(format!("LBP needs at least 3x3, got {w}x{h}")));
    }
    let mut codes = Vec::with_capacity(((w - 2) * (h - 2)) as usize);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = img.get(x, y);
            let mut code = 0u8;
            for (p, (dx, dy)) in NEIGHBOURS.iter().enumerate() {
                let n = img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32);
                if n >= center {
                    code |= 1 << p;
                }
            }
            codes.push(code);
        }
    }
    Ok(LbpMap {
        width: w - 2,
        height: h - 2,
        codes,
    })
}

/// Normalised 256-bin histogram of the codes under foreground pixels.
/// Returns all zeros when no interior pixel is foreground.
pub fn lbp_histogram(map: &LbpMap, mask: &Mask) -> Result<Vec<f64>> {
    ensure_dims(map.source_dims(), mask.dims())?;
    let mut counts = vec![0u64; LBP_BINS];
    let mut total = 0u64;
    for y in 1..=map.height {
        for x in 1..=map.width {
            if mask.get(x, y) {
                counts[map.code_at_source(x, y) as usize] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Ok(vec![0.0; LBP_BINS]);
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// Mean hue (degrees, arithmetic) and mean value over the foreground.
pub fn hv_stats(img: &RgbImage, mask: &Mask) -> Result<(f64, f64)> {
    ensure_dims(img.dims(), mask.dims())?;
    let (mut sum_h, mut sum_v, mut n) = (0.0, 0.0, 0usize);
    for (&[r, g, b], &fg) in img.pixels().iter().zip(mask.bits()) {
        if fg {
            let hsv = rgb_to_hsv(r, g, b);
            sum_h += hsv.h;
            sum_v += hsv.v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("empty foreground mask".into()));
    }
    Ok((sum_h / n as f64, sum_v / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `[meanH/360, meanV, LBP histogram]`, 258 values.
    A,
    /// `[meanH/360, meanV]`.
    B,
}

impl Variant {
    pub fn dims(self) -> usize {
        match self {
            Variant::A => 2 + LBP_BINS,
            Variant::B => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            other => Err(Error::invalid(format!("unknown feature variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub variant: Variant,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(variant: Variant, values: Vec<f64>) -> Result<Self> {
        if values.len() != variant.dims() {
            return Err(Error::invalid(format!(
                "variant {variant} needs {} values, got {}",
                variant.dims(),
                values.len()
            )));
        }
        Ok(Self { variant, values })
    }
}

/// Builds the classifier input for a segmented fruit. LBP codes are computed
/// on the grayscale of the background-zeroed image.
pub fn build_feature_vector(img: &RgbImage, mask: &Mask, variant: Variant) -> Result<FeatureVector> {
    let (mean_h, mean_v) = hv_stats(img, mask)?;
    let mut values = Vec::with_capacity(variant.dims());
    values.push(mean_h / 360.0);
    values.push(mean_v);
    if variant == Variant::A {
        let gray = to_gray(&apply_mask(img, mask)?);
        values.extend(lbp_histogram(&lbp(&gray)?, mask)?);
    }
    FeatureVector::new(variant, values)
}
