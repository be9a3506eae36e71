//! Raster types, image I/O and the pre-segmentation filters.
//!
//! Quantisation everywhere in the crate goes through [`round_half_up`], and
//! windowed operators replicate edge pixels instead of shrinking the image.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Largest accepted side length; guards `width * height` against overflow
/// and absurd allocations from hostile headers.
pub const MAX_DIMENSION: u32 = 1 << 15;

/// Rounds to the nearest integer, halves away from negative infinity.
#[inline]
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

#[inline]
pub(crate) fn quantize(x: f64) -> u8 {
    round_half_up(x).clamp(0.0, 255.0) as u8
}

fn check_dims(width: u32, height: u32) -> Result<usize> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("empty raster {width}x{height}")));
    }
    if width > MAX_DIMENSION || height > MAX_DIMENSION {
        return Err(Error::Image(format!(
            "dimension overflow: {width}x{height} exceeds {MAX_DIMENSION}"
        )));
    }
    Ok(width as usize * height as usize)
}

/// Row-major 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self> {
        let n = check_dims(width, height)?;
        if pixels.len() != n {
            return Err(Error::invalid(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Result<Self> {
        let n = check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            pixels: vec![color; n],
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self> {
        let n = check_dims(width, height)?;
        let mut pixels = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
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

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[u8; 3]] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<[u8; 3]> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, px: [u8; 3]) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = px;
    }

    /// Splits into three single-channel rasters.
    pub fn channels(&self) -> [GrayImage; 3] {
        let plane = |c: usize| GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p[c]).collect(),
        };
        [plane(0), plane(1), plane(2)]
    }

    pub fn from_channels(r: &GrayImage, g: &GrayImage, b: &GrayImage) -> Result<Self> {
        if r.dims() != g.dims() || r.dims() != b.dims() {
            return Err(Error::DimensionMismatch {
                expected: r.dims(),
                actual: if r.dims() != g.dims() { g.dims() } else { b.dims() },
            });
        }
        let pixels = r
            .pixels
            .iter()
            .zip(&g.pixels)
            .zip(&b.pixels)
            .map(|((&r, &g), &b)| [r, g, b])
            .collect();
        Ok(Self {
            width: r.width,
            height: r.height,
            pixels,
        })
    }

    fn to_image_rgb(&self) -> image::RgbImage {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        image::RgbImage::from_raw(self.width, self.height, raw).expect("buffer sized from dims")
    }

    fn from_image_rgb(img: image::RgbImage) -> Result<Self> {
        let (width, height) = img.dimensions();
        check_dims(width, height).map_err(|e| Error::Image(e.to_string()))?;
        let pixels = img
            .into_raw()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Row-major 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let n = check_dims(width, height)?;
        if pixels.len() != n {
            return Err(Error::invalid(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self> {
        let n = check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            pixels: vec![value; n],
        })
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

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Reads a PNG or binary PPM (P6) file.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes PNG or binary PPM bytes, sniffing the format from the magic.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let format = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P6") {
        ImageFormat::Pnm
    } else {
        return Err(Error::Image("expected PNG or binary PPM (P6)".into()));
    };
    let mut reader = ImageReader::with_format(Cursor::new(bytes), format);
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_DIMENSION);
    limits.max_image_height = Some(MAX_DIMENSION);
    reader.limits(limits);
    let decoded = reader.decode().map_err(|e| Error::Image(e.to_string()))?;
    RgbImage::from_image_rgb(decoded.to_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.to_image_rgb()
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

/// Binary PPM: `P6\n<w> <h>\n255\n` followed by raw RGB triples.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 3);
    out.extend(img.pixels.iter().flatten());
    out
}

pub fn encode_gray_png(img: &GrayImage) -> Vec<u8> {
    let buf = image::GrayImage::from_raw(img.width, img.height, img.pixels.clone())
        .expect("buffer sized from dims");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_luma8();
    let (w, h) = decoded.dimensions();
    GrayImage::new(w, h, decoded.into_raw()).map_err(|e| Error::Image(e.to_string()))
}

/// Writes PNG or PPM depending on the file extension (`.ppm` → P6, else PNG).
pub fn save_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let bytes = if is_ppm { encode_ppm(img) } else { encode_png(img) };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Luma with BT.601 weights.
pub fn to_gray(img: &RgbImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img
            .pixels
            .iter()
            .map(|&[r, g, b]| quantize(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64))
            .collect(),
    }
}

/// Order-statistic filter: each output pixel is the `rank`-th smallest value
/// (0-based) in the `window`×`window` neighbourhood. The median is
/// `rank = window² / 2`.
pub fn rank_filter(img: &GrayImage, window: u32, rank: u32) -> Result<GrayImage> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "rank filter window must be odd and >= 3, got {window}"
        )));
    }
    let area = window * window;
    if rank >= area {
        return Err(Error::invalid(format!(
            "rank {rank} out of range for a {window}x{window} window"
        )));
    }
    let half = (window / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = Vec::with_capacity(img.pixels.len());
    // Counting sort over a 256-bin histogram keeps this O(window²) per pixel
    // without allocating.
    let mut hist = [0u32; 256];
    for y in 0..h {
        for x in 0..w {
            hist.fill(0);
            for dy in -half..=half {
                let sy = (y + dy).clamp(0, h - 1) as usize;
                let row = &img.pixels[sy * w as usize..(sy + 1) * w as usize];
                for dx in -half..=half {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    hist[row[sx] as usize] += 1;
                }
            }
            let mut seen = 0u32;
            let mut value = 255u8;
            for (v, &count) in hist.iter().enumerate() {
                seen += count;
                if seen > rank {
                    value = v as u8;
                    break;
                }
            }
            out.push(value);
        }
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    })
}

/// `out = round(c · ln(1 + in))` with `c = 255 / ln 256`, so 0 → 0 and
/// 255 → 255.
pub fn log_transform(img: &GrayImage) -> GrayImage {
    let lut = log_lut();
    img.map(|v| lut[v as usize])
}

fn log_lut() -> [u8; 256] {
    let c = 255.0 / 256f64.ln();
    let mut lut = [0u8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        *slot = quantize(c * (i as f64).ln_1p());
    }
    lut
}
