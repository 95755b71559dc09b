use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::heatmap::Heatmap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub alpha: f64,
    /// Heatmap values below this leave the pixel untouched.
    pub threshold: f64,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self { alpha: 0.4, threshold: 0.2 }
    }
}

impl OverlayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!("overlay alpha/threshold outside [0, 1]: {self:?}")));
        }
        Ok(())
    }
}

/// Three-stop gradient: blue (0,0,255) at 0, green (0,255,0) at 0.5,
/// red (255,0,0) at 1, linear in between. Returned as 0–255 reals.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.5 {
        let t = v / 0.5;
        [0.0, 255.0 * t, 255.0 * (1.0 - t)]
    } else {
        let t = (v - 0.5) / 0.5;
        [255.0 * t, 255.0 * (1.0 - t), 0.0]
    }
}

/// `(1−α)·image + α·colormap(hm)` where hm ≥ threshold, rounded to the
/// nearest integer; other pixels are copied.
pub fn render_overlay(image: &RgbImage, hm: &Heatmap, cfg: &OverlayConfig) -> Result<RgbImage> {
    cfg.validate()?;
    if (image.width() as usize, image.height() as usize) != (hm.width, hm.height) {
        return Err(Error::shape(
            "render_overlay",
            format!("image {:?} vs heatmap {}×{}", image.dimensions(), hm.width, hm.height),
        ));
    }
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = hm.at(x as usize, y as usize);
        if v < cfg.threshold {
            continue;
        }
        let c = colormap(v);
        let blend = |i: usize| ((1.0 - cfg.alpha) * f64::from(p.0[i]) + cfg.alpha * c[i]).round().clamp(0.0, 255.0) as u8;
        *p = Rgb([blend(0), blend(1), blend(2)]);
    }
    Ok(out)
}

/// 8-bit grayscale rendering, value·255 rounded.
pub fn heatmap_to_gray(hm: &Heatmap) -> GrayImage {
    GrayImage::from_fn(hm.width as u32, hm.height as u32, |x, y| {
        Luma([(hm.at(x as usize, y as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}
