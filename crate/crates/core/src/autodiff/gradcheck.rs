//! Central finite-difference checks of the tape's analytic gradients.
//!
//! A check evaluates a scalar function of some leaf tensors, takes the
//! analytic gradient by [`Tape::backward`], and compares each checked
//! coordinate against `(f(x+h) − f(x−h)) / 2h`. Coordinates whose ±h
//! interval straddles a ReLU or max-pool switch point have no valid
//! central difference at that step; they are detected by comparing the
//! estimate at `h` and `h/2` (which agree to O(h²) on smooth pieces) and
//! are counted as skipped rather than checked.

use serde::{Deserialize, Serialize};

use super::tape::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelWeights, ParamVars};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so that near-zero gradients
/// are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;
const KINK_TOL: f64 = 1e-7;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl CheckResult {
    pub fn merge(&mut self, other: &CheckResult) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out)?;
    if !v.is_scalar() {
        return Err(Error::shape("gradcheck", format!("function returned shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Check `f` against finite differences at every coordinate of every input,
/// or at `sample` randomly chosen coordinates per input when given.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], sample: Option<(usize, &mut RngState)>, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| Ok(grads.get(v)?.map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec())))
        .collect::<Result<_>>()?;

    let coords: Vec<Vec<usize>> = match sample {
        None => inputs.iter().map(|t| (0..t.len()).collect()).collect(),
        Some((k, rng)) => inputs.iter().map(|t| (0..k.min(t.len())).map(|_| rng.below(t.len())).collect()).collect(),
    };

    let mut res = CheckResult { name: name.to_string(), ..Default::default() };
    let mut work = inputs.to_vec();
    for (i, idx) in coords.iter().enumerate() {
        for &j in idx {
            let x0 = inputs[i].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[j] = x0 + h;
                let plus = evaluate(&work, &f)?;
                work[i].data_mut()[j] = x0 - h;
                let minus = evaluate(&work, &f)?;
                work[i].data_mut()[j] = x0;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = central(FD_STEP)?;
            let half = central(FD_STEP / 2.0)?;
            if (numeric - half).abs() > KINK_TOL * numeric.abs().max(1.0) {
                res.skipped += 1;
                continue;
            }
            let a = analytic[i][j];
            res.checked += 1;
            res.max_rel_error = res.max_rel_error.max(rel_error(a, numeric));
            res.max_abs_error = res.max_abs_error.max((a - numeric).abs());
        }
    }
    Ok(res)
}

fn uniform(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values at least `gap` apart in magnitude from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut RngState) -> Tensor<f64> {
    let mut t = uniform(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// Distinct values on a grid of spacing `gap`, shuffled, so every max-pool
/// window has a unique winner by a wide margin.
fn distinct(shape: &[usize], gap: f64, rng: &mut RngState) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn readout(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x)?.len();
    let mut rng = RngState::new(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    tape.weighted_sum(x, &w)
}

/// The per-layer, composed and whole-model checks, `trials_per_op` random
/// instances each. Returns one merged result per check name.
pub fn standard_suite(seed: u64, trials_per_op: usize) -> Result<Vec<CheckResult>> {
    let mut rng = RngState::new(seed);
    let mut results: Vec<CheckResult> = Vec::new();
    let mut record = |r: CheckResult| match results.iter_mut().find(|x| x.name == r.name) {
        Some(x) => x.merge(&r),
        None => results.push(r),
    };

    for t in 0..trials_per_op {
        let s = rng.next_u64();
        let (stride, pad) = (1 + t % 2, (t / 2) % 2);
        let x = uniform(&[2, 2, 5, 5], &mut rng);
        let w = uniform(&[3, 2, 3, 3], &mut rng);
        let b = uniform(&[3], &mut rng);
        record(check("conv2d", &[x, w, b], None, |tp, v| {
            let y = tp.conv2d(v[0], v[1], v[2], stride, pad)?;
            readout(tp, y, s)
        })?);

        let x = distinct(&[2, 2, 4, 6], 0.01, &mut rng);
        record(check("maxpool2x2", &[x], None, |tp, v| {
            let y = tp.maxpool2x2(v[0])?;
            readout(tp, y, s)
        })?);

        let x = away_from_zero(&[2, 3, 4, 4], 0.01, &mut rng);
        record(check("relu", &[x], None, |tp, v| {
            let y = tp.relu(v[0])?;
            readout(tp, y, s)
        })?);

        let x = uniform(&[2, 3, 4, 4], &mut rng);
        record(check("dropout", &[x], None, |tp, v| {
            let y = tp.dropout(v[0], 0.5, Mode::Train, &mut RngState::new(s))?;
            readout(tp, y, s)
        })?);

        let x = uniform(&[3, 4, 3, 5], &mut rng);
        record(check("global_avg_pool", &[x], None, |tp, v| {
            let y = tp.global_avg_pool(v[0])?;
            readout(tp, y, s)
        })?);

        let logits = Tensor::uniform(&[4, 3], -3.0, 3.0, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
        record(check("softmax_cross_entropy", &[logits], None, |tp, v| {
            Ok(tp.softmax_cross_entropy(v[0], &labels)?.0)
        })?);

        let (a, b) = (uniform(&[2, 3, 2, 2], &mut rng), uniform(&[2, 3, 2, 2], &mut rng));
        record(check("add", &[a, b], None, |tp, v| {
            let y = tp.add(v[0], v[1])?;
            readout(tp, y, s)
        })?);

        let x = uniform(&[3, 4], &mut rng);
        let pick = rng.below(12);
        record(check("sum_pick", &[x], None, |tp, v| {
            let total = tp.sum(v[0])?;
            let one = tp.pick(v[0], pick)?;
            tp.add(total, one)
        })?);

        // conv → relu → dropout → maxpool → conv → GAP → cross-entropy
        let x = uniform(&[2, 2, 6, 6], &mut rng);
        let w1 = uniform(&[3, 2, 3, 3], &mut rng);
        let b1 = uniform(&[3], &mut rng);
        let w2 = uniform(&[2, 3, 2, 2], &mut rng);
        let b2 = uniform(&[2], &mut rng);
        let labels = vec![rng.below(2), rng.below(2)];
        record(check("two_layer_net", &[x, w1, b1, w2, b2], None, |tp, v| {
            let h = tp.conv2d(v[0], v[1], v[2], 1, 1)?;
            let h = tp.relu(h)?;
            let h = tp.dropout(h, 0.25, Mode::Train, &mut RngState::new(s))?;
            let h = tp.maxpool2x2(h)?;
            let y = tp.conv2d(h, v[3], v[4], 1, 0)?;
            let logits = tp.global_avg_pool(y)?;
            Ok(tp.softmax_cross_entropy(logits, &labels)?.0)
        })?);
    }

    let cfg = ModelConfig::tiny();
    for _ in 0..trials_per_op.div_ceil(4) {
        let s = rng.next_u64();
        let weights = ModelWeights::<f64>::init(&cfg, &mut rng)?;
        let names: Vec<String> = weights.names().cloned().collect();
        let x = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let labels = vec![0, 1];
        let mut inputs = vec![x];
        inputs.extend(names.iter().map(|n| weights.get(n).cloned()).collect::<Result<Vec<_>>>()?);
        let r = check("tiny_model", &inputs, Some((3, &mut rng)), |tp, v| {
            let params = ParamVars::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
            let out = forward(tp, &cfg, &params, v[0], Mode::Train, &mut RngState::new(s))?;
            Ok(tp.softmax_cross_entropy(out.logits, &labels)?.0)
        })?;
        record(r);
    }
    Ok(results)
}
