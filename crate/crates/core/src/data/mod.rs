//! Image ingestion, preprocessing, augmentation and datasets.

pub mod augment;
pub mod dataset;
pub mod image_ops;
pub mod manifest;
pub mod synthetic;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use dataset::{batch_iter, batch_plan, load_sample, Batch, BatchIter, Dataset};
pub use image_ops::{center_crop_resize, decode_rgb, normalize, ImageSample, NormalizationStats};
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord, Split};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus};
