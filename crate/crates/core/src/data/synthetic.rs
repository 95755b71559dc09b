//! Synthetic fundus-like corpus with known optic-cup geometry.
//!
//! Each image shows a dark circular retinal field, random vessel-like
//! curves, a bright elliptical optic disc and a paler concentric cup. The
//! glaucoma class draws its cup-to-disc ratio from a range above
//! [`SyntheticConfig::cdr_threshold`], the normal class from below it, so
//! thresholding the true ratio separates the classes perfectly. Glaucoma
//! samples get a lesion mask covering the cup; normal samples get an
//! all-zero mask.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image_ops::{encode_png_gray, encode_png_rgb, MASK_ON};
use super::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, RngState, RNG_ALGORITHM};
use crate::Class;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Side of the square rendered images.
    pub extent: u32,
    /// Disc semi-axis range, as fractions of the extent.
    pub disc_radius: (f64, f64),
    pub normal_cdr: (f64, f64),
    pub glaucoma_cdr: (f64, f64),
    pub cdr_threshold: f64,
    /// Standard deviation of additive pixel noise, in 0–255 units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 1080,
            val: 220,
            test: 110,
            extent: 256,
            disc_radius: (0.10, 0.13),
            normal_cdr: (0.15, 0.35),
            glaucoma_cdr: (0.60, 0.85),
            cdr_threshold: 0.5,
            noise: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            let n = self.count(split);
            if !n.is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "{split} count {n} is odd; 1:1 balance needs even counts"
                )));
            }
        }
        if self.extent < 32 {
            return Err(Error::InvalidArgument(format!("extent {} below 32", self.extent)));
        }
        let (lo, hi) = self.disc_radius;
        if !(0.0 < lo && lo <= hi && hi < 0.25) {
            return Err(Error::InvalidArgument("disc_radius must satisfy 0 < lo ≤ hi < 0.25".into()));
        }
        let ordered = |(a, b): (f64, f64)| 0.0 < a && a <= b && b < 1.0;
        if !ordered(self.normal_cdr) || !ordered(self.glaucoma_cdr) {
            return Err(Error::InvalidArgument("cup-to-disc ranges must lie in (0, 1)".into()));
        }
        if !(self.normal_cdr.1 < self.cdr_threshold && self.cdr_threshold < self.glaucoma_cdr.0) {
            return Err(Error::InvalidArgument(
                "cdr_threshold must separate the normal and glaucoma ranges".into(),
            ));
        }
        Ok(())
    }
}

/// Audit record for one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub split: Split,
    pub label: Class,
    pub cup_to_disc: f64,
    pub disc_center: (f64, f64),
    pub disc_radii: (f64, f64),
}

/// Sidecar written next to the manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    pub generator: SyntheticConfig,
    pub seed: u64,
    pub rng: String,
    pub samples: Vec<SampleMeta>,
}

pub struct SyntheticCorpus {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub metadata: CorpusMetadata,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

pub const METADATA_FILE: &str = "metadata.json";

/// A rendered sample before it is written to disk.
pub struct Rendered {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub meta: SampleMeta,
}

/// Render sample `index` of `split`. Label alternates normal/glaucoma so
/// every even-sized split is exactly balanced.
pub fn render_sample(cfg: &SyntheticConfig, split: Split, index: usize) -> Rendered {
    let label = if index.is_multiple_of(2) { Class::Normal } else { Class::Glaucoma };
    let mut rng = RngState::derive(cfg.seed, stable_hash(split.as_str()) ^ index as u64);
    let e = f64::from(cfg.extent);
    let id = format!("{split}_{index:05}");

    let field_r = 0.47 * e;
    let (cx, cy) = (e / 2.0, e / 2.0);
    let base = [
        rng.uniform_range(140.0, 185.0),
        rng.uniform_range(50.0, 75.0),
        rng.uniform_range(15.0, 30.0),
    ];

    let disc_r = rng.uniform_range(cfg.disc_radius.0, cfg.disc_radius.1) * e;
    let (rx, ry) = (disc_r * rng.uniform_range(0.9, 1.0), disc_r * rng.uniform_range(1.0, 1.12));
    let dcx = cx + rng.uniform_range(-0.18, 0.18) * e;
    let dcy = cy + rng.uniform_range(-0.08, 0.08) * e;
    let range = if label == Class::Glaucoma { cfg.glaucoma_cdr } else { cfg.normal_cdr };
    let cdr = rng.uniform_range(range.0, range.1);
    let disc_color = [rng.uniform_range(225.0, 250.0), rng.uniform_range(170.0, 200.0), rng.uniform_range(90.0, 120.0)];
    let cup_color = [255.0, rng.uniform_range(235.0, 250.0), rng.uniform_range(195.0, 215.0)];

    // Vessel darkness map: random walks leaving the disc.
    let n = cfg.extent as usize;
    let mut vessel = vec![0.0f64; n * n];
    let vessels = 6 + rng.below(5);
    for _ in 0..vessels {
        let mut angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let (mut x, mut y) = (dcx, dcy);
        let mut width = rng.uniform_range(1.2, 2.6) * e / 256.0;
        let steps = (field_r / 2.0) as usize;
        for _ in 0..steps {
            angle += rng.uniform_range(-0.12, 0.12);
            x += 2.0 * angle.cos();
            y += 2.0 * angle.sin();
            width = (width * 0.995).max(0.6);
            stamp_disk(&mut vessel, n, x, y, width);
        }
    }

    let mut image = RgbImage::new(cfg.extent, cfg.extent);
    let mut mask = GrayImage::new(cfg.extent, cfg.extent);
    for py in 0..cfg.extent {
        for px in 0..cfg.extent {
            let (fx, fy) = (f64::from(px) + 0.5, f64::from(py) + 0.5);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let field = (field_r - d + 0.5).clamp(0.0, 1.0);
            if field == 0.0 {
                continue;
            }
            let shade = 1.0 - 0.35 * (d / field_r).powi(2);
            let v = vessel[py as usize * n + px as usize].min(1.0);
            let mut c = base.map(|b| b * shade * (1.0 - 0.45 * v));

            let q = (((fx - dcx) / rx).powi(2) + ((fy - dcy) / ry).powi(2)).sqrt();
            let disc_alpha = ((1.0 - q) * disc_r + 0.5).clamp(0.0, 1.0);
            let cup_alpha = ((cdr - q) * disc_r + 0.5).clamp(0.0, 1.0);
            for k in 0..3 {
                c[k] = c[k] * (1.0 - disc_alpha) + disc_color[k] * disc_alpha;
                c[k] = c[k] * (1.0 - cup_alpha) + cup_color[k] * cup_alpha;
            }
            if label == Class::Glaucoma && q <= cdr {
                mask.put_pixel(px, py, Luma([MASK_ON]));
            }
            let noise = rng.normal() * cfg.noise;
            let px_rgb = c.map(|ch| ((ch + noise) * field).round().clamp(0.0, 255.0) as u8);
            image.put_pixel(px, py, Rgb(px_rgb));
        }
    }

    let meta = SampleMeta {
        id,
        split,
        label,
        cup_to_disc: cdr,
        disc_center: (dcx, dcy),
        disc_radii: (rx, ry),
    };
    Rendered { image, mask, meta }
}

fn stamp_disk(map: &mut [f64], n: usize, x: f64, y: f64, r: f64) {
    let (x0, x1) = ((x - r - 1.0).floor().max(0.0) as usize, ((x + r + 1.0).ceil() as usize).min(n));
    let (y0, y1) = ((y - r - 1.0).floor().max(0.0) as usize, ((y + r + 1.0).ceil() as usize).min(n));
    for py in y0..y1 {
        for px in x0..x1 {
            let d = ((px as f64 + 0.5 - x).powi(2) + (py as f64 + 0.5 - y).powi(2)).sqrt();
            let a = (r - d + 0.5).clamp(0.0, 1.0);
            let v = &mut map[py * n + px];
            *v = v.max(a);
        }
    }
}

/// Render the whole corpus into `out_dir`: `images/`, `masks/`, one
/// manifest per split and `metadata.json`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut manifests = Vec::new();
    let mut samples = Vec::new();
    for split in Split::ALL {
        let metas: Vec<SampleMeta> = (0..cfg.count(split))
            .into_par_iter()
            .map(|i| -> Result<SampleMeta> {
                let r = render_sample(cfg, split, i);
                let img_path = out.join("images").join(format!("{}.png", r.meta.id));
                let mask_path = out.join("masks").join(format!("{}.png", r.meta.id));
                std::fs::write(&img_path, encode_png_rgb(&r.image)?).map_err(|e| Error::io(&img_path, e))?;
                std::fs::write(&mask_path, encode_png_gray(&r.mask)?).map_err(|e| Error::io(&mask_path, e))?;
                Ok(r.meta)
            })
            .collect::<Result<_>>()?;
        let records = metas
            .iter()
            .map(|m| ManifestRecord {
                image: PathBuf::from(format!("images/{}.png", m.id)),
                label: m.label,
                mask: Some(PathBuf::from(format!("masks/{}.png", m.id))),
            })
            .collect();
        let manifest = DatasetManifest { root: out.to_path_buf(), split: Some(split), records };
        manifest.save(manifest_path(out, split))?;
        manifests.push(manifest);
        samples.extend(metas);
    }

    let metadata = CorpusMetadata {
        generator: cfg.clone(),
        seed: cfg.seed,
        rng: RNG_ALGORITHM.into(),
        samples,
    };
    let meta_path = out.join(METADATA_FILE);
    let json = serde_json::to_vec_pretty(&metadata)?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    let mut it = manifests.into_iter();
    let (train, val, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(SyntheticCorpus { train, val, test, metadata })
}
