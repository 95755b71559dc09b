use serde::{Deserialize, Serialize};

use super::image_ops::{crop_resize, flip_horizontal, scale_brightness, ImageSample};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Random crop, horizontal flip and multiplicative brightness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Side of the random square crop as a fraction of the image side.
    pub random_crop_fraction: f64,
    pub hflip_probability: f64,
    /// Brightness factor is uniform in [1−σ, 1+σ], floored at
    /// [`MIN_BRIGHTNESS`].
    pub brightness_sigma: f64,
}

pub const MIN_BRIGHTNESS: f64 = 0.2;

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { random_crop_fraction: 0.9, hflip_probability: 0.5, brightness_sigma: 0.8 }
    }
}

impl AugmentConfig {
    /// Configuration under which [`augment`] is the identity.
    pub fn neutral() -> Self {
        Self { random_crop_fraction: 1.0, hflip_probability: 0.0, brightness_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.random_crop_fraction > 0.0 && self.random_crop_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "random_crop_fraction {} outside (0, 1]",
                self.random_crop_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::InvalidArgument(format!(
                "hflip_probability {} outside [0, 1]",
                self.hflip_probability
            )));
        }
        if !(self.brightness_sigma >= 0.0 && self.brightness_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "brightness_sigma {} must be finite and nonnegative",
                self.brightness_sigma
            )));
        }
        Ok(())
    }
}

/// The random draws behind one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub crop_size: u32,
    pub crop_x: u32,
    pub crop_y: u32,
    pub flip: bool,
    pub brightness: f64,
}

impl AugmentDraw {
    /// Always consumes four values from `rng`, whatever the config.
    pub fn sample(cfg: &AugmentConfig, width: u32, height: u32, rng: &mut RngState) -> Self {
        let side = width.min(height);
        let crop_size = ((f64::from(side) * cfg.random_crop_fraction).round() as u32).clamp(1, side);
        let ux = rng.uniform();
        let uy = rng.uniform();
        let crop_x = (ux * f64::from(width - crop_size + 1)).floor() as u32;
        let crop_y = (uy * f64::from(height - crop_size + 1)).floor() as u32;
        let flip = rng.uniform() < cfg.hflip_probability;
        let u = rng.uniform();
        let brightness = if cfg.brightness_sigma == 0.0 {
            1.0
        } else {
            (1.0 - cfg.brightness_sigma + 2.0 * cfg.brightness_sigma * u).max(MIN_BRIGHTNESS)
        };
        Self { crop_size, crop_x, crop_y, flip, brightness }
    }

    /// Apply to image and mask: crop and resize back, flip, then brightness
    /// (image only).
    pub fn apply(&self, sample: &ImageSample) -> ImageSample {
        let (w, h) = sample.pixels.dimensions();
        let mut out = if self.crop_size == w && self.crop_size == h {
            sample.clone()
        } else {
            let mut c = crop_resize(sample, self.crop_x, self.crop_y, self.crop_size, w.min(h));
            if w != h {
                c.pixels = super::image_ops::resize_bilinear(&c.pixels, w, h);
                c.lesion_mask = c.lesion_mask.map(|m| super::image_ops::resize_nearest(&m, w, h));
            }
            c
        };
        if self.flip {
            out = flip_horizontal(&out);
        }
        out.pixels = scale_brightness(&out.pixels, self.brightness);
        out
    }
}

/// Randomly augment `sample`, keeping its extent and label.
pub fn augment(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut RngState) -> ImageSample {
    let (w, h) = sample.pixels.dimensions();
    AugmentDraw::sample(cfg, w, h, rng).apply(sample)
}
