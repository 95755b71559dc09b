use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::data::image_ops::bilinear_resample;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelWeights, ParamVars};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};
use crate::Class;

/// Row-major map with values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub source_layer: String,
    pub target_class: Class,
    /// Model input side, the extent [`upsample_heatmap`] lifts to.
    pub input_size: usize,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// (x, y) of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// Channel weights α_k = mean of ∂y/∂A_k, map = ReLU(Σ_k α_k A_k), divided
/// by its maximum. `activation` and `gradient` are K×h×w, row-major.
pub fn gradcam_map(activation: &[f64], gradient: &[f64], k: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let plane = h * w;
    if activation.len() != k * plane || gradient.len() != k * plane || plane == 0 {
        return Err(Error::shape(
            "gradcam",
            format!("{} activations and {} gradients for {k}×{h}×{w}", activation.len(), gradient.len()),
        ));
    }
    let mut map = vec![0.0; plane];
    for c in 0..k {
        let g = &gradient[c * plane..(c + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        for (m, a) in map.iter_mut().zip(&activation[c * plane..(c + 1) * plane]) {
            *m += alpha * a;
        }
    }
    let max = map.iter().copied().fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("gradcam"));
    }
    for m in &mut map {
        *m = if max > 0.0 { m.max(0.0) / max } else { 0.0 };
    }
    Ok(map)
}

/// Grad-CAM for `target` at activation `layer`, at that layer's resolution.
/// The gradient comes from the target logit (before softmax) in eval mode.
pub fn compute_gradcam<T: Real>(
    config: &ModelConfig,
    weights: &ModelWeights<T>,
    input: &Tensor<T>,
    target: Class,
    layer: &str,
) -> Result<Heatmap> {
    let [n, ..] = input.dims4("compute_gradcam")?;
    if n != 1 {
        return Err(Error::InvalidArgument(format!("Grad-CAM takes one image, got a batch of {n}")));
    }
    if target.index() >= config.num_classes {
        return Err(Error::InvalidArgument(format!("class {} outside the model's outputs", target.index())));
    }
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, weights, false)?;
    let x = tape.constant(input.clone())?;
    let out = forward(&mut tape, config, &params, x, Mode::Eval, &mut RngState::new(0))?;
    let a = out.activation(layer)?;
    tape.retain_grad(a)?;
    let activation = tape.value(a)?.clone();
    let [_, k, h, w] = activation.dims4("compute_gradcam")?;
    let y = tape.pick(out.logits, target.index())?;
    let grads = tape.backward(y)?;
    let gradient: Vec<f64> = match grads.get(a)? {
        Some(g) => g.data().iter().map(|&v| Real::to_f64(v)).collect(),
        None => vec![0.0; activation.len()],
    };
    let act: Vec<f64> = activation.data().iter().map(|&v| Real::to_f64(v)).collect();
    Ok(Heatmap {
        width: w,
        height: h,
        values: gradcam_map(&act, &gradient, k, h, w)?,
        source_layer: layer.to_string(),
        target_class: target,
        input_size: config.input_size,
    })
}

/// Bilinear lift to `input_size`×`input_size` (half-pixel centers).
pub fn upsample_heatmap(hm: &Heatmap) -> Heatmap {
    let s = hm.input_size;
    let values = bilinear_resample(&hm.values, (hm.width, hm.height), (s, s), 1)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Heatmap { width: s, height: s, values, ..hm.clone() }
}
