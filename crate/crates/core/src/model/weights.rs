use std::collections::BTreeMap;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Named parameter store, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    /// He-normal initialization (std = √(2 / fan_in)) for conv weights, zero
    /// biases. Parameters are drawn in forward order from `rng`.
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for spec in config.param_specs() {
            let t = if spec.shape.len() == 4 {
                let fan_in: usize = spec.shape[1..].iter().product();
                Tensor::normal(&spec.shape, (2.0 / fan_in as f64).sqrt(), rng)
            } else {
                Tensor::zeros(&spec.shape)
            };
            params.insert(spec.name, t);
        }
        Ok(Self { params })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        Ok(Self { params })
    }

    pub fn from_map(params: BTreeMap<String, Tensor<T>>) -> Self {
        Self { params }
    }

    /// Check that names and shapes match `config` exactly.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.param_specs();
        for spec in &specs {
            let t = self
                .params
                .get(&spec.name)
                .ok_or_else(|| Error::UnknownParameter(format!("{} (missing)", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "weights",
                    format!("{} has shape {:?}, config expects {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
        }
        if specs.len() != self.params.len() {
            let extra = self
                .params
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnknownParameter(extra));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
