use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid ADAM hyperparameters {self:?}")))
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }
}

/// One bias-corrected ADAM update of every parameter that has a gradient.
///
/// Gradients are checked for NaN/Inf before anything is modified, so a bad
/// step leaves parameters and state untouched.
pub fn adam_step<T: Real>(
    params: &mut ModelWeights<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            ));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            log::warn!("non-finite gradient in {name} at element {bad}; step aborted");
            return Err(Error::NonFinite("gradient passed to adam_step"));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.epsilon));

    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
