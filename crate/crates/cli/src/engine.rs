//! Loaded model plus the image → prediction → gated Grad-CAM path shared by
//! the service and the `infer` command.

use std::path::{Path, PathBuf};

use base64::Engine as _;
use fundus_core::data::image_ops::{center_crop_resize, decode_rgb, encode_png_gray, encode_png_rgb};
use fundus_core::data::{ImageSample, NormalizationStats};
use fundus_core::gradcam::{heatmap_to_gray, localize, LocalizationResult, OverlayConfig};
use fundus_core::model::{container, ModelConfig, ModelWeights};
use fundus_core::train::CheckpointMeta;
use fundus_core::{Class, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probability_glaucoma: f64,
    pub predicted_class: Class,
    pub heatmap_png: Option<String>,
    pub overlay_png: Option<String>,
    pub model_id: String,
    pub elapsed_ms: f64,
}

pub struct InferenceEngine {
    pub model: ModelConfig,
    pub weights: ModelWeights<f32>,
    pub stats: NormalizationStats,
    pub overlay: OverlayConfig,
    pub checksum: u32,
    pub model_id: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Data { path: path.into(), detail: e.to_string() })
}

/// Sidecar looked for when no model is named: `<weights>.json`, then
/// `best.json` beside the weights.
fn sidecar(weights: &Path) -> Option<PathBuf> {
    let own = weights.with_extension("json");
    if own.is_file() {
        return Some(own);
    }
    let best = weights.parent()?.join(fundus_core::train::CHECKPOINT_META_FILE);
    best.is_file().then_some(best)
}

/// Model config and normalization from a preset name, a config or
/// checkpoint-sidecar JSON file, or the sidecar next to `weights`.
pub fn resolve_model(spec: Option<&str>, weights: &Path) -> Result<(ModelConfig, NormalizationStats)> {
    let from_file = |path: &Path| -> Result<(ModelConfig, NormalizationStats)> {
        let value: serde_json::Value = read_json(path)?;
        if let Ok(meta) = serde_json::from_value::<CheckpointMeta>(value.clone()) {
            return Ok((meta.model, meta.normalization));
        }
        let model = serde_json::from_value::<ModelConfig>(value)
            .map_err(|e| Error::Data { path: path.into(), detail: format!("not a model config: {e}") })?;
        Ok((model, NormalizationStats::default()))
    };
    match spec {
        Some(s) if Path::new(s).is_file() => from_file(Path::new(s)),
        Some(s) => ModelConfig::preset(s)
            .map(|m| (m, NormalizationStats::default()))
            .ok_or_else(|| Error::InvalidArgument(format!("`{s}` is neither a model preset nor a file"))),
        None => match sidecar(weights) {
            Some(p) => from_file(&p),
            None => Err(Error::InvalidArgument(format!(
                "no model given and no checkpoint sidecar next to {}",
                weights.display()
            ))),
        },
    }
}

impl InferenceEngine {
    pub fn load(weights_path: &Path, model_spec: Option<&str>) -> Result<Self> {
        let (model, stats) = resolve_model(model_spec, weights_path)?;
        let weights = container::load_weights(weights_path, &model)?;
        Self::new(model, weights, stats)
    }

    pub fn new(model: ModelConfig, weights: ModelWeights<f32>, stats: NormalizationStats) -> Result<Self> {
        weights.check_against(&model)?;
        let checksum = container::checksum(&container::encode(&weights)?)?;
        let model_id = format!("{}-{checksum:08x}", model.variant_name);
        Ok(Self { model, weights, stats, overlay: OverlayConfig::default(), checksum, model_id })
    }

    /// Decode and center-crop/resize to the model input size.
    pub fn preprocess(&self, bytes: &[u8]) -> Result<ImageSample> {
        let pixels = decode_rgb(bytes)?;
        center_crop_resize(&ImageSample::new("upload", pixels, Class::Normal), self.model.input_size as u32)
    }

    pub fn run(&self, sample: &ImageSample) -> Result<LocalizationResult> {
        localize(&self.model, &self.weights, sample, &self.stats, &self.overlay)
    }

    /// Full request path. `elapsed_ms` is left at 0 for the caller to fill.
    pub fn predict_bytes(&self, bytes: &[u8]) -> Result<PredictResponse> {
        self.respond(&self.preprocess(bytes)?)
    }

    pub fn respond(&self, sample: &ImageSample) -> Result<PredictResponse> {
        let result = self.run(sample)?;
        let b64 = |png: Vec<u8>| base64::engine::general_purpose::STANDARD.encode(png);
        let heatmap_png = result.heatmap.as_ref().map(|h| encode_png_gray(&heatmap_to_gray(h))).transpose()?.map(b64);
        let overlay_png = result.overlay.as_ref().map(encode_png_rgb).transpose()?.map(b64);
        Ok(PredictResponse {
            probability_glaucoma: result.prediction.p_glaucoma,
            predicted_class: result.prediction.class,
            heatmap_png,
            overlay_png,
            model_id: self.model_id.clone(),
            elapsed_ms: 0.0,
        })
    }
}
