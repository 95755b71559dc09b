use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::heatmap::{compute_gradcam, upsample_heatmap, Heatmap};
use super::overlay::{render_overlay, OverlayConfig};
use crate::data::image_ops::{mask_is_empty, mask_is_set, normalize, ImageSample, NormalizationStats};
use crate::error::{Error, Result};
use crate::model::{predict_proba, ModelConfig, ModelWeights, Prediction};
use crate::tensor::Tensor;
use crate::Class;

/// Prediction plus, for glaucoma predictions only, the Grad-CAM products.
///
/// `gated` is true when the gate opened (glaucoma predicted) and a map was
/// produced; a normal prediction leaves `gated` false and no map.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub prediction: Prediction,
    pub gated: bool,
    /// Upsampled to the model input size.
    pub heatmap: Option<Heatmap>,
    pub overlay: Option<RgbImage>,
    /// Whether the heatmap argmax fell inside the sample's lesion mask, when
    /// there is a map and a nonempty mask.
    pub pointing_hit: Option<bool>,
}

/// Predict, and run Grad-CAM on the glaucoma logit only when glaucoma is
/// the predicted class. `sample` must already be at model input size.
pub fn localize(
    config: &ModelConfig,
    weights: &ModelWeights<f32>,
    sample: &ImageSample,
    stats: &NormalizationStats,
    overlay: &OverlayConfig,
) -> Result<LocalizationResult> {
    let s = config.input_size;
    if sample.pixels.dimensions() != (s as u32, s as u32) {
        return Err(Error::shape(
            "localize",
            format!("image {:?}, model expects {s}×{s}", sample.pixels.dimensions()),
        ));
    }
    let t = normalize(&sample.pixels, stats);
    let input: Tensor<f32> = t.reshape(&[1, 3, s, s])?;
    let prediction = predict_proba(config, weights, &input)?[0];
    if prediction.class != Class::Glaucoma {
        return Ok(LocalizationResult { prediction, gated: false, heatmap: None, overlay: None, pointing_hit: None });
    }
    let coarse = compute_gradcam(config, weights, &input, Class::Glaucoma, &config.gradcam_layer())?;
    let hm = upsample_heatmap(&coarse);
    let rendered = render_overlay(&sample.pixels, &hm, overlay)?;
    let pointing_hit = match &sample.lesion_mask {
        Some(m) if !mask_is_empty(m) => Some(pointing_hit(&hm, m)?),
        _ => None,
    };
    Ok(LocalizationResult { prediction, gated: true, heatmap: Some(hm), overlay: Some(rendered), pointing_hit })
}

fn check_extent(hm: &Heatmap, mask: &GrayImage) -> Result<()> {
    if (mask.width() as usize, mask.height() as usize) != (hm.width, hm.height) {
        return Err(Error::shape(
            "pointing_game",
            format!("heatmap {}×{} vs mask {:?}", hm.width, hm.height, mask.dimensions()),
        ));
    }
    Ok(())
}

fn pointing_hit(hm: &Heatmap, mask: &GrayImage) -> Result<bool> {
    check_extent(hm, mask)?;
    let (x, y) = hm.argmax();
    Ok(mask_is_set(mask, x as u32, y as u32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointingReport {
    pub hits: usize,
    pub evaluated: usize,
    /// hits / evaluated; 0 when nothing was evaluated.
    pub rate: f64,
    /// Positions skipped because their mask was empty.
    pub excluded: Vec<usize>,
}

/// Pointing game: a hit when the first row-major argmax of the upsampled
/// heatmap lies inside the mask.
pub fn pointing_game_eval(heatmaps: &[Heatmap], masks: &[GrayImage]) -> Result<PointingReport> {
    if heatmaps.len() != masks.len() {
        return Err(Error::InvalidArgument(format!("{} heatmaps for {} masks", heatmaps.len(), masks.len())));
    }
    let (mut hits, mut evaluated, mut excluded) = (0, 0, Vec::new());
    for (i, (hm, mask)) in heatmaps.iter().zip(masks).enumerate() {
        check_extent(hm, mask)?;
        if mask_is_empty(mask) {
            excluded.push(i);
            continue;
        }
        evaluated += 1;
        hits += usize::from(pointing_hit(hm, mask)?);
    }
    let rate = if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 };
    Ok(PointingReport { hits, evaluated, rate, excluded })
}

/// IoU between `hm ≥ threshold` and the mask.
pub fn mask_iou(hm: &Heatmap, mask: &GrayImage, threshold: f64) -> Result<f64> {
    check_extent(hm, mask)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y, _) in mask.enumerate_pixels() {
        let a = hm.at(x as usize, y as usize) >= threshold;
        let b = mask_is_set(mask, x, y);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image_ops::{empty_mask, MASK_ON};
    use crate::rng::RngState;
    use image::{Luma, Rgb};

    fn peak_at(x: usize, y: usize, s: usize) -> Heatmap {
        let mut values = vec![0.1; s * s];
        values[y * s + x] = 1.0;
        Heatmap { width: s, height: s, values, source_layer: "l".into(), target_class: Class::Glaucoma, input_size: s }
    }

    fn mask_at(points: &[(u32, u32)], s: u32) -> GrayImage {
        let mut m = empty_mask(s, s);
        for &(x, y) in points {
            m.put_pixel(x, y, Luma([MASK_ON]));
        }
        m
    }

    #[test]
    fn counting() {
        let mut hms = Vec::new();
        let mut masks = Vec::new();
        for i in 0..10u32 {
            hms.push(peak_at(i as usize % 4, 1, 4));
            let target = if i < 8 { (i % 4, 1) } else { (3 - i % 4, 3) };
            masks.push(mask_at(&[target], 4));
        }
        let r = pointing_game_eval(&hms, &masks).unwrap();
        assert_eq!((r.hits, r.evaluated, r.rate), (8, 10, 0.8));
    }

    #[test]
    fn full_mask_always_hits_and_empty_is_excluded() {
        let full = GrayImage::from_pixel(4, 4, Luma([MASK_ON]));
        let r = pointing_game_eval(&[peak_at(2, 3, 4), peak_at(0, 0, 4)], &[full, empty_mask(4, 4)]).unwrap();
        assert_eq!((r.hits, r.evaluated, r.excluded), (1, 1, vec![1]));
    }

    #[test]
    fn first_argmax_wins_ties() {
        let mut hm = peak_at(3, 0, 4);
        hm.values[9] = 1.0;
        assert_eq!(hm.argmax(), (3, 0));
    }

    #[test]
    fn iou() {
        let hm = peak_at(1, 1, 4);
        assert_eq!(mask_iou(&hm, &mask_at(&[(1, 1), (2, 2)], 4), 0.5).unwrap(), 0.5);
    }

    #[test]
    fn gate_follows_prediction() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f32>::zeros(&cfg).unwrap();
        let last = format!("head_{}.bias", cfg.head.len());
        let sample = ImageSample::new("s", RgbImage::from_pixel(32, 32, Rgb([120, 60, 20])), Class::Glaucoma);
        let stats = NormalizationStats::default();
        let r = localize(&cfg, &w, &sample, &stats, &OverlayConfig::default()).unwrap();
        assert!(!r.gated && r.heatmap.is_none() && r.overlay.is_none());
        assert_eq!(r.prediction.class, Class::Normal);

        w = ModelWeights::init(&cfg, &mut RngState::new(8)).unwrap();
        *w.get_mut(&last).unwrap() = Tensor::new(vec![2], vec![-5.0, 5.0]).unwrap();
        let r = localize(&cfg, &w, &sample, &stats, &OverlayConfig::default()).unwrap();
        assert!(r.gated);
        let hm = r.heatmap.unwrap();
        assert_eq!((hm.width, hm.height), (32, 32));
        assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.overlay.unwrap().dimensions(), (32, 32));
    }
}
