use rayon::prelude::*;

use super::augment::{augment, AugmentConfig};
use super::image_ops::{center_crop_resize, decode_rgb, normalize, ImageSample, NormalizationStats};
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Read, decode and preprocess record `i` of `manifest` to `size`×`size`.
pub fn load_sample(manifest: &DatasetManifest, i: usize, size: u32) -> Result<ImageSample> {
    let path = manifest.image_path(i);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let pixels = decode_rgb(&bytes).map_err(|e| Error::data(&path, e.to_string()))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut sample = ImageSample::new(id, pixels, manifest.records[i].label);
    if let Some(mp) = manifest.mask_path(i) {
        let mask = image::open(&mp).map_err(|e| Error::data(&mp, e.to_string()))?.to_luma8();
        sample = sample.with_mask(mask).map_err(|e| Error::data(&mp, e.to_string()))?;
    }
    center_crop_resize(&sample, size)
}

/// Preprocessed samples held in memory at model input size.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub input_size: u32,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, input_size: u32) -> Result<Self> {
        let samples = (0..manifest.len())
            .into_par_iter()
            .map(|i| load_sample(manifest, i, input_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, input_size })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            input_size: self.input_size,
        }
    }

    /// Normalized N×3×S×S tensor of the given samples, no augmentation.
    pub fn tensor(&self, indices: &[usize], stats: &NormalizationStats) -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = indices
            .par_iter()
            .map(|&i| to_batch_item(&self.samples[i], stats))
            .collect::<Result<_>>()?;
        Tensor::stack_first(&parts)
    }
}

fn to_batch_item(sample: &ImageSample, stats: &NormalizationStats) -> Result<Tensor<f32>> {
    let t = normalize(&sample.pixels, stats);
    let shape = [1, t.shape()[0], t.shape()[1], t.shape()[2]];
    t.reshape(&shape)
}

/// Partition `0..n` into batches, optionally shuffled. The last batch may
/// be short.
pub fn batch_plan(n: usize, batch_size: usize, shuffle: bool, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One training or evaluation batch.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over batches of a [`Dataset`]. With augmentation enabled each
/// sample gets its own generator derived from (epoch seed, sample index),
/// so batches are identical regardless of worker count.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
    stats: NormalizationStats,
    augment: Option<(AugmentConfig, u64)>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.plan.next()?;
        Some(self.make(indices))
    }
}

impl BatchIter<'_> {
    fn make(&self, indices: Vec<usize>) -> Result<Batch> {
        let parts: Vec<Tensor<f32>> = indices
            .par_iter()
            .map(|&i| {
                let s = &self.dataset.samples[i];
                match &self.augment {
                    Some((cfg, seed)) => {
                        let mut rng = RngState::derive(*seed, i as u64);
                        to_batch_item(&augment(s, cfg, &mut rng), &self.stats)
                    }
                    None => to_batch_item(s, &self.stats),
                }
            })
            .collect::<Result<_>>()?;
        let labels = indices.iter().map(|&i| self.dataset.samples[i].label.index()).collect();
        Ok(Batch { images: Tensor::stack_first(&parts)?, labels, indices })
    }
}

pub fn batch_iter<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngState,
    stats: NormalizationStats,
    augment: Option<AugmentConfig>,
) -> BatchIter<'a> {
    let plan = batch_plan(dataset.len(), batch_size, shuffle, rng);
    let augment = augment.map(|cfg| (cfg, rng.next_u64()));
    BatchIter { dataset, plan: plan.into_iter(), stats, augment }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Class;
    use image::{Rgb, RgbImage};

    fn toy(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let label = if i % 3 == 0 { Class::Glaucoma } else { Class::Normal };
                ImageSample::new(format!("s{i}"), RgbImage::from_pixel(8, 8, Rgb([i as u8; 3])), label)
            })
            .collect();
        Dataset { samples, input_size: 8 }
    }

    #[test]
    fn partition_sizes() {
        let plan = batch_plan(10, 3, false, &mut RngState::new(0));
        let sizes: Vec<usize> = plan.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let a = batch_plan(50, 7, true, &mut RngState::new(9));
        let b = batch_plan(50, 7, true, &mut RngState::new(9));
        assert_eq!(a, b);
        assert_ne!(a, batch_plan(50, 7, false, &mut RngState::new(9)));
    }

    #[test]
    fn epoch_labels_form_the_manifest_multiset() {
        let ds = toy(23);
        let mut rng = RngState::new(4);
        let it = batch_iter(&ds, 5, true, &mut rng, NormalizationStats::default(), Some(AugmentConfig::default()));
        let mut seen = Vec::new();
        let mut got = Vec::new();
        for b in it {
            let b = b.unwrap();
            assert_eq!(b.images.shape()[1..], [3, 8, 8]);
            seen.extend(b.indices);
            got.extend(b.labels);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        let mut expect = ds.labels();
        expect.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, expect);
    }
}
