//! Glaucoma screening engine for fundus photographs.
//!
//! A VGG-style fully-convolutional classifier trained with ADAM, with
//! Grad-CAM localization of the evidence behind glaucoma predictions.
//! Everything numeric is implemented here on a small tape-based autodiff
//! core, so the crate has no native ML dependencies.
//!
//! Module map:
//! - [`autodiff`]: tensors ops and reverse-mode differentiation
//! - [`model`]: architecture, weights and the `.mdnw` container
//! - [`data`]: decoding, preprocessing, augmentation, manifests and the
//!   synthetic fundus corpus
//! - [`train`]: ADAM, early stopping, stratified k-fold cross-validation
//! - [`metrics`]: accuracy, precision, recall, F1, ROC-AUC
//! - [`gradcam`]: heatmaps, overlays, pointing-game evaluation

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Real, Tensor};

/// Diagnosis class. Glaucoma is the positive class throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Normal = 0,
    Glaucoma = 1,
}

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Class::Normal),
            1 => Some(Class::Glaucoma),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        model::CLASS_NAMES[self.index()]
    }
}
