use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::ModelWeights;
use crate::autodiff::{kernels, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};
use crate::Class;

/// Parameters registered on a tape, by name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Record every weight on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn register<T: Real>(tape: &mut Tape<T>, weights: &ModelWeights<T>, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in weights.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
        }
        Ok(Self { vars })
    }

    /// Use variables already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Logits plus the named activations recorded along the way.
pub struct ForwardOutput {
    pub logits: Var,
    /// `blockB_convI` (post-ReLU), `blockB_pool`, `head_H` and `head_out`.
    pub activations: BTreeMap<String, Var>,
}

impl ForwardOutput {
    pub fn activation(&self, name: &str) -> Result<Var> {
        self.activations
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown activation layer `{name}`")))
    }
}

/// Record the classifier on `tape`. `input` must be N×C×S×S with
/// S = `config.input_size`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ParamVars,
    input: Var,
    mode: Mode,
    rng: &mut RngState,
) -> Result<ForwardOutput> {
    let [_, c, h, w] = tape.value(input)?.dims4("forward")?;
    let s = config.input_size;
    if c != config.input_channels || h != s || w != s {
        return Err(Error::shape(
            "forward",
            format!("input is {c}×{h}×{w}, model expects {}×{s}×{s}", config.input_channels),
        ));
    }
    let mut activations = BTreeMap::new();
    let mut x = input;
    for (b, block) in config.blocks.iter().enumerate() {
        for i in 0..block.convs {
            let stem = format!("block{}_conv{}", b + 1, i + 1);
            let (wv, bv) = (params.get(&format!("{stem}.weight"))?, params.get(&format!("{stem}.bias"))?);
            x = tape.conv2d(x, wv, bv, 1, 1)?;
            x = tape.relu(x)?;
            activations.insert(stem, x);
        }
        x = tape.dropout(x, config.dropout_rate, mode, rng)?;
        x = tape.maxpool2x2(x)?;
        activations.insert(format!("block{}_pool", b + 1), x);
    }
    let last = config.head.len();
    for h in 1..=last {
        let stem = format!("head_{h}");
        let (wv, bv) = (params.get(&format!("{stem}.weight"))?, params.get(&format!("{stem}.bias"))?);
        x = tape.conv2d(x, wv, bv, 1, 0)?;
        if h < last {
            x = tape.relu(x)?;
            activations.insert(stem, x);
            x = tape.dropout(x, config.dropout_rate, mode, rng)?;
        } else {
            activations.insert("head_out".into(), x);
        }
    }
    let logits = tape.global_avg_pool(x)?;
    Ok(ForwardOutput { logits, activations })
}

/// Forward pass without gradients; returns N×classes logits.
pub fn forward_logits<T: Real>(
    config: &ModelConfig,
    weights: &ModelWeights<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, weights, false)?;
    let input = tape.constant(batch.clone())?;
    let out = forward(&mut tape, config, &params, input, mode, rng)?;
    Ok(tape.value(out.logits)?.clone())
}

/// Class probabilities for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_normal: f64,
    pub p_glaucoma: f64,
    pub class: Class,
}

impl Prediction {
    /// Softmax over a 2-logit row. Exact ties predict normal.
    pub fn from_logits(normal: f64, glaucoma: f64) -> Self {
        let m = normal.max(glaucoma);
        let (en, eg) = ((normal - m).exp(), (glaucoma - m).exp());
        let z = en + eg;
        let (p_normal, p_glaucoma) = (en / z, eg / z);
        let class = if p_glaucoma > p_normal { Class::Glaucoma } else { Class::Normal };
        Self { p_normal, p_glaucoma, class }
    }
}

/// Eval-mode probabilities for each sample of `batch`.
pub fn predict_proba<T: Real>(
    config: &ModelConfig,
    weights: &ModelWeights<T>,
    batch: &Tensor<T>,
) -> Result<Vec<Prediction>> {
    if config.num_classes != 2 {
        return Err(Error::InvalidConfig("predict_proba needs a 2-class model".into()));
    }
    // Eval mode never draws from the generator.
    let logits = forward_logits(config, weights, batch, Mode::Eval, &mut RngState::new(0))?;
    Ok(logits
        .data()
        .chunks(2)
        .map(|r| Prediction::from_logits(r[0].to_f64(), r[1].to_f64()))
        .collect())
}

/// Softmax helper re-exported for callers holding raw logits.
pub fn probabilities<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::softmax(logits)
}
