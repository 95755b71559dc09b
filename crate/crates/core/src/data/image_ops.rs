//! Decoding, geometry and normalization of RGB images and binary masks.

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Class;

/// Mask pixels at or above this value count as inside the lesion.
pub const MASK_ON: u8 = 255;

/// Decoded image with its label and optional lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: RgbImage,
    pub label: Class,
    pub lesion_mask: Option<GrayImage>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: RgbImage, label: Class) -> Self {
        Self { id: id.into(), pixels, label, lesion_mask: None }
    }

    pub fn with_mask(mut self, mask: GrayImage) -> Result<Self> {
        if mask.dimensions() != self.pixels.dimensions() {
            return Err(Error::shape(
                "image_sample",
                format!("mask {:?} vs image {:?}", mask.dimensions(), self.pixels.dimensions()),
            ));
        }
        self.lesion_mask = Some(mask);
        Ok(self)
    }
}

/// Per-channel RGB means, in 0–255 pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self { mean: [105.51, 54.52, 16.19] }
    }
}

/// Image formats accepted for ingestion.
pub fn supported_format(format: ImageFormat) -> bool {
    matches!(format, ImageFormat::Png | ImageFormat::Jpeg | ImageFormat::Bmp)
}

/// Decode PNG, JPEG or BMP bytes to 8-bit RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let format = image::guess_format(bytes)?;
    if !supported_format(format) {
        return Err(Error::InvalidArgument(format!("unsupported image format {format:?}")));
    }
    Ok(image::load_from_memory_with_format(bytes, format)?.to_rgb8())
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Source coordinate for destination pixel `d` under half-pixel-center
/// alignment, as (lower index, upper index, weight of upper).
#[inline]
fn bilinear_tap(d: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear interpolation of a row-major `channels`-interleaved grid.
pub fn bilinear_resample(
    src: &[f64],
    (sw, sh): (usize, usize),
    (dw, dh): (usize, usize),
    channels: usize,
) -> Vec<f64> {
    let xs: Vec<_> = (0..dw).map(|x| bilinear_tap(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw * dh * channels);
    for y in 0..dh {
        let (y0, y1, fy) = bilinear_tap(y, sh, dh);
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(yy * sw + xx) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Bilinear resize (half-pixel centers, edge clamped). Same-size resizes
/// return an exact copy.
pub fn resize_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let src: Vec<f64> = img.as_raw().iter().map(|&v| f64::from(v)).collect();
    let out = bilinear_resample(&src, (sw, sh), (width as usize, height as usize), 3);
    let raw = out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(width, height, raw).expect("buffer sized for image")
}

/// Nearest-neighbor resize, used for masks so they stay binary.
pub fn resize_nearest(mask: &GrayImage, width: u32, height: u32) -> GrayImage {
    if mask.dimensions() == (width, height) {
        return mask.clone();
    }
    let (sw, sh) = mask.dimensions();
    GrayImage::from_fn(width, height, |x, y| {
        let sx = (((f64::from(x) + 0.5) * f64::from(sw) / f64::from(width)) as u32).min(sw - 1);
        let sy = (((f64::from(y) + 0.5) * f64::from(sh) / f64::from(height)) as u32).min(sh - 1);
        *mask.get_pixel(sx, sy)
    })
}

/// Crop a `size`×`size` square at (x, y) from image and mask, then resize both
/// to `target`×`target`.
pub fn crop_resize(sample: &ImageSample, x: u32, y: u32, size: u32, target: u32) -> ImageSample {
    let crop = image::imageops::crop_imm(&sample.pixels, x, y, size, size).to_image();
    let pixels = resize_bilinear(&crop, target, target);
    let lesion_mask = sample.lesion_mask.as_ref().map(|m| {
        let c = image::imageops::crop_imm(m, x, y, size, size).to_image();
        resize_nearest(&c, target, target)
    });
    ImageSample { id: sample.id.clone(), pixels, label: sample.label, lesion_mask }
}

/// Crop the largest centered square and resize it to `target`×`target`.
pub fn center_crop_resize(sample: &ImageSample, target: u32) -> Result<ImageSample> {
    if target < 8 {
        return Err(Error::InvalidArgument(format!("target size {target} below 8")));
    }
    let (w, h) = sample.pixels.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!("degenerate {w}×{h} image `{}`", sample.id)));
    }
    let side = w.min(h);
    Ok(crop_resize(sample, (w - side) / 2, (h - side) / 2, side, target))
}

/// Subtract per-channel means; returns a 3×H×W tensor (no variance scaling).
pub fn normalize(pixels: &RgbImage, stats: &NormalizationStats) -> Tensor<f32> {
    let (w, h) = pixels.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in pixels.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (f64::from(p[c]) - stats.mean[c]) as f32;
        }
    }
    Tensor::new(vec![3, h as usize, w as usize], data).expect("sized for image")
}

pub fn flip_horizontal(sample: &ImageSample) -> ImageSample {
    ImageSample {
        id: sample.id.clone(),
        pixels: image::imageops::flip_horizontal(&sample.pixels),
        label: sample.label,
        lesion_mask: sample.lesion_mask.as_ref().map(image::imageops::flip_horizontal),
    }
}

/// Multiply every channel by `factor`, rounding and clamping to [0, 255].
pub fn scale_brightness(img: &RgbImage, factor: f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = Rgb(p.0.map(|v| (f64::from(v) * factor).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn mask_is_set(mask: &GrayImage, x: u32, y: u32) -> bool {
    mask.get_pixel(x, y)[0] >= 128
}

pub fn mask_is_empty(mask: &GrayImage) -> bool {
    mask.as_raw().iter().all(|&v| v < 128)
}

pub fn empty_mask(width: u32, height: u32) -> GrayImage {
    GrayImage::from_pixel(width, height, Luma([0]))
}
