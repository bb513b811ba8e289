//! Image degradations for robustness evaluation: Gaussian blur and JPEG
//! re-encoding.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Codec identifier recorded in evaluation reports.
pub const JPEG_CODEC: &str = "image-rs jpeg encoder 0.25 (baseline, 4:4:4, libjpeg quality scaling)";

pub const BLUR_SIGMAS: [f64; 3] = [1.0, 2.0, 3.0];
pub const JPEG_QUALITIES: [u8; 5] = [40, 50, 60, 70, 80];

/// Row-major 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Codec("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Codec(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(Error::Codec(format!(
                "pixel buffer has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width as usize * height as usize * channels as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.pixels[((y as usize * self.width as usize + x as usize) * self.channels as usize) + c as usize]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Converts any decoded image to gray or RGB; alpha is dropped.
    pub fn from_dynamic(img: DynamicImage) -> Self {
        let (w, h) = (img.width(), img.height());
        match img {
            DynamicImage::ImageLuma8(g) => Self::new(w, h, 1, g.into_raw()),
            other if !other.color().has_color() => Self::new(w, h, 1, other.to_luma8().into_raw()),
            other => Self::new(w, h, 3, other.to_rgb8().into_raw()),
        }
        .expect("decoded buffer matches its dimensions")
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width, self.height);
        match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.pixels.clone()).expect("valid gray buffer")),
            _ => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.pixels.clone()).expect("valid rgb buffer")),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref()).map_err(|e| Error::Codec(format!("{}: {e}", path.as_ref().display())))?;
        Ok(Self::from_dynamic(img))
    }

    /// Writes PNG or JPEG (quality 95) depending on the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_jpeg = matches!(
            path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("jpg" | "jpeg")
        );
        if is_jpeg {
            std::fs::write(path, jpeg_encode(self, 95)?)?;
            return Ok(());
        }
        self.to_dynamic()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))
    }
}

/// Index into `[0, n)` for any integer offset, mirroring about the edges
/// with the edge sample repeated (`… 2 1 0 | 0 1 2 … n-1 | n-1 n-2 …`).
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1-D Gaussian taps for radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with mirrored borders. `sigma == 0` returns an
/// identical copy.
pub fn gaussian_blur(img: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h, c) = (img.width as usize, img.height as usize, img.channels as usize);

    let mut horizontal = vec![0.0f64; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &tap) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + k as i64 - radius, w);
                    acc += tap * f64::from(img.pixels[(y * w + sx) * c + ch]);
                }
                horizontal[(y * w + x) * c + ch] = acc;
            }
        }
    }

    let mut out = vec![0u8; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &tap) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - radius, h);
                    acc += tap * horizontal[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RasterImage::new(img.width, img.height, img.channels, out)
}

/// Baseline JPEG bytes at `quality` (1–100).
pub fn jpeg_encode(img: &RasterImage, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!("jpeg quality must be in [1, 100], got {quality}")));
    }
    let color = match img.channels {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode(&img.pixels, img.width, img.height, color)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(bytes)
}

pub fn jpeg_decode(bytes: &[u8]) -> Result<RasterImage> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Jpeg).map_err(|e| Error::Codec(e.to_string()))?;
    Ok(RasterImage::from_dynamic(img))
}

/// Encode-then-decode through the JPEG codec.
pub fn jpeg_degrade(img: &RasterImage, quality: u8) -> Result<RasterImage> {
    let out = jpeg_decode(&jpeg_encode(img, quality)?)?;
    if out.width != img.width || out.height != img.height {
        return Err(Error::Codec("codec changed image dimensions".into()));
    }
    Ok(out)
}

pub fn mse(a: &RasterImage, b: &RasterImage) -> f64 {
    assert_eq!(a.pixels.len(), b.pixels.len(), "images must have equal shape");
    a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.pixels.len() as f64
}

/// Mean absolute 4-neighbour Laplacian over interior pixels, all channels.
pub fn mean_abs_laplacian(img: &RasterImage) -> f64 {
    let (w, h, c) = (img.width as usize, img.height as usize, img.channels as usize);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let px = |x: usize, y: usize, ch: usize| f64::from(img.pixels[(y * w + x) * c + ch]);
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let lap = px(x - 1, y, ch) + px(x + 1, y, ch) + px(x, y - 1, ch) + px(x, y + 1, ch) - 4.0 * px(x, y, ch);
                total += lap.abs();
            }
        }
    }
    total / ((w - 2) * (h - 2) * c) as f64
}

/// A degradation setting, parsed from `blur:<sigma>` or `jpeg:<quality>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Degradation {
    Blur { sigma: f64 },
    Jpeg { quality: u8 },
}

impl Degradation {
    pub fn apply(&self, img: &RasterImage) -> Result<RasterImage> {
        match *self {
            Degradation::Blur { sigma } => gaussian_blur(img, sigma),
            Degradation::Jpeg { quality } => jpeg_degrade(img, quality),
        }
    }
}

impl std::str::FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (op, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("degradation {s:?} must look like blur:<sigma> or jpeg:<q>")))?;
        match op {
            "blur" => {
                let sigma: f64 = arg.parse().map_err(|_| Error::Config(format!("bad sigma {arg:?}")))?;
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::Config(format!("bad sigma {arg:?}")));
                }
                Ok(Degradation::Blur { sigma })
            }
            "jpeg" => {
                let quality: u8 = arg.parse().map_err(|_| Error::Config(format!("bad quality {arg:?}")))?;
                if !(1..=100).contains(&quality) {
                    return Err(Error::Config(format!("bad quality {arg:?}")));
                }
                Ok(Degradation::Jpeg { quality })
            }
            other => Err(Error::Config(format!("unknown degradation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Degradation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Degradation::Blur { sigma } => write!(f, "blur:{sigma}"),
            Degradation::Jpeg { quality } => write!(f, "jpeg:{quality}"),
        }
    }
}
