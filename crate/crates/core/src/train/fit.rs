use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::early_stop::{epochs_to_csv, run_with_early_stopping, EpochRecord, EpochRunner};
use crate::autodiff::{kernels, Mode, Tape};
use crate::data::{batch_iter, AugmentConfig, Dataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::model::{container, forward, ModelConfig, ModelWeights, ParamVars, Prediction};
use crate::rng::{RngState, RNG_ALGORITHM};
use crate::tensor::{Real, Tensor};
use crate::Class;

/// Stream ids used with [`RngState::derive`].
pub const INIT_STREAM: u64 = 1;
pub const TRAIN_STREAM: u64 = 2;

pub const CHECKPOINT_FILE: &str = "best.mdnw";
pub const CHECKPOINT_META_FILE: &str = "best.json";
pub const EPOCHS_FILE: &str = "epochs.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Required drop in validation loss for an epoch to count as better.
    pub min_delta: f64,
    pub num_folds: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub normalization: NormalizationStats,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 120,
            patience: 10,
            min_delta: 0.0,
            num_folds: 5,
            seed: 0,
            adam: AdamConfig::default(),
            augment: Some(AugmentConfig::default()),
            normalization: NormalizationStats::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::InvalidArgument(format!("min_delta {} must be nonnegative", self.min_delta)));
        }
        self.adam.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Sidecar written next to each best-epoch checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub id: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub val_acc: f64,
    pub checksum: String,
    pub seed: u64,
    pub rng: String,
    pub model: ModelConfig,
    pub normalization: NormalizationStats,
}

pub fn checkpoint_id(model: &ModelConfig, epoch: usize, crc: u32) -> String {
    format!("{}-e{epoch:03}-{crc:08x}", model.variant_name)
}

pub fn load_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub stopped_early: bool,
    pub checkpoint_id: String,
    pub checkpoint_path: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Weights restored from the best epoch.
    pub weights: ModelWeights<f32>,
}

/// Mean cross-entropy, accuracy and per-sample predictions in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
    pub labels: Vec<Class>,
}

impl Evaluation {
    /// Glaucoma probabilities, the scores used for ROC analysis.
    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.p_glaucoma).collect()
    }
}

pub fn evaluate_dataset(
    model: &ModelConfig,
    weights: &ModelWeights<f32>,
    dataset: &Dataset,
    stats: &NormalizationStats,
    batch_size: usize,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let mut rng = RngState::new(0);
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(dataset.len());
    for batch in batch_iter(dataset, batch_size, false, &mut rng, *stats, None) {
        let batch = batch?;
        let logits = forward::forward_logits(model, weights, &batch.images, Mode::Eval, &mut rng)?;
        let wide: Tensor<f64> = logits.cast();
        let (l, _) = kernels::softmax_cross_entropy_forward(&wide, &batch.labels)?;
        loss += l * batch.labels.len() as f64;
        predictions.extend(wide.data().chunks(2).map(|r| Prediction::from_logits(r[0], r[1])));
    }
    let labels: Vec<Class> = dataset.samples.iter().map(|s| s.label).collect();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p.class == **l).count();
    Ok(Evaluation {
        loss: loss / dataset.len() as f64,
        accuracy: correct as f64 / dataset.len() as f64,
        predictions,
        labels,
    })
}

/// Mean loss and accuracy over the batches of one training epoch.
#[derive(Clone, Copy, Debug, Default)]
struct Running {
    loss: f64,
    correct: usize,
    seen: usize,
}

struct FitRunner<'a> {
    cfg: &'a TrainConfig,
    model: &'a ModelConfig,
    weights: ModelWeights<f32>,
    adam: AdamState<f32>,
    train: &'a Dataset,
    val: &'a Dataset,
    rng: RngState,
    checkpoint: Option<(PathBuf, u32)>,
    best_crc: u32,
}

impl FitRunner<'_> {
    fn step(&mut self, images: Tensor<f32>, labels: &[usize], run: &mut Running) -> Result<()> {
        let mut tape = Tape::new();
        let params = ParamVars::register(&mut tape, &self.weights, true)?;
        let input = tape.constant(images)?;
        let out = forward::forward(&mut tape, self.model, &params, input, Mode::Train, &mut self.rng)?;
        let (loss, probs) = tape.softmax_cross_entropy(out.logits, labels)?;
        let loss_value = tape.value(loss)?.data()[0].to_f64();
        let mut grads = tape.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, var) in params.iter() {
            if let Some(g) = grads.take(*var)? {
                named.insert(name.clone(), g);
            }
        }
        adam_step(&mut self.weights, &named, &mut self.adam, &self.cfg.adam)?;
        run.loss += loss_value * labels.len() as f64;
        run.seen += labels.len();
        run.correct += probs
            .data()
            .chunks(self.model.num_classes)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lower index.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged { epoch, detail: format!("non-finite value from {what}") },
        other => other,
    }
}

impl EpochRunner for FitRunner<'_> {
    type Snapshot = ModelWeights<f32>;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let batches = batch_iter(
            self.train,
            self.cfg.batch_size,
            true,
            &mut self.rng,
            self.cfg.normalization,
            self.cfg.augment,
        );
        let mut run = Running::default();
        for batch in batches {
            let batch = batch?;
            self.step(batch.images, &batch.labels, &mut run).map_err(|e| diverged(epoch, e))?;
        }
        let val = evaluate_dataset(self.model, &self.weights, self.val, &self.cfg.normalization, self.cfg.batch_size)
            .map_err(|e| diverged(epoch, e))?;
        let record = EpochRecord {
            epoch,
            train_loss: run.loss / run.seen as f64,
            train_acc: run.correct as f64 / run.seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} train_acc {:.3} val_loss {:.4} val_acc {:.3}",
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        Ok(record)
    }

    fn snapshot(&self) -> ModelWeights<f32> {
        self.weights.clone()
    }

    fn on_improvement(&mut self, record: &EpochRecord, snapshot: &ModelWeights<f32>) -> Result<()> {
        let bytes = container::encode(snapshot)?;
        let crc = container::checksum(&bytes)?;
        self.best_crc = crc;
        let Some(dir) = &self.cfg.checkpoint_dir else {
            return Ok(());
        };
        let path = dir.join(CHECKPOINT_FILE);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let meta = CheckpointMeta {
            id: checkpoint_id(self.model, record.epoch, crc),
            epoch: record.epoch,
            val_loss: record.val_loss,
            val_acc: record.val_acc,
            checksum: format!("{crc:08x}"),
            seed: self.cfg.seed,
            rng: RNG_ALGORITHM.to_string(),
            model: self.model.clone(),
            normalization: self.cfg.normalization,
        };
        let meta_path = dir.join(CHECKPOINT_META_FILE);
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        self.checkpoint = Some((path, crc));
        Ok(())
    }
}

/// Train from `init` with ADAM, monitoring validation loss each epoch.
///
/// Stops once validation loss has not improved for `patience` epochs and
/// returns the best epoch's weights. With a checkpoint directory the best
/// weights are written there on every improvement, so a diverging run
/// leaves the last good checkpoint in place.
pub fn fit_with_early_stopping(
    cfg: &TrainConfig,
    model: &ModelConfig,
    init: ModelWeights<f32>,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    init.check_against(model)?;
    for (name, ds) in [("training", train), ("validation", val)] {
        if ds.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} set is empty")));
        }
        if ds.input_size as usize != model.input_size {
            return Err(Error::shape(
                "fit",
                format!("{name} images are {0}×{0}, model expects {1}×{1}", ds.input_size, model.input_size),
            ));
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut runner = FitRunner {
        cfg,
        model,
        weights: init,
        adam: AdamState::new(),
        train,
        val,
        rng: RngState::derive(cfg.seed, TRAIN_STREAM),
        checkpoint: None,
        best_crc: 0,
    };
    let out = run_with_early_stopping(&mut runner, cfg.max_epochs, cfg.patience, cfg.min_delta)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join(EPOCHS_FILE);
        std::fs::write(&path, epochs_to_csv(&out.records)).map_err(|e| Error::io(&path, e))?;
    }
    let report = TrainReport {
        checkpoint_id: checkpoint_id(model, out.best_epoch, runner.best_crc),
        checkpoint_path: runner.checkpoint.map(|(p, _)| p),
        epochs: out.records,
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        stop_epoch: out.stop_epoch,
        stopped_early: out.stopped_early,
    };
    Ok(TrainOutcome { report, weights: out.best })
}

/// Starting point for training from scratch: He-normal everywhere except
/// the final 2-channel classifier, whose weights start at zero.
///
/// Inputs are mean-subtracted but not rescaled, so activations reach the
/// hundreds; a random classifier on top of them starts with logits in the
/// hundreds and ADAM's first steps collapse the ReLUs. A zero classifier
/// starts at loss ln 2 and still receives a gradient on its first step.
pub fn initial_weights(model: &ModelConfig, seed: u64) -> Result<ModelWeights<f32>> {
    let mut w = ModelWeights::init(model, &mut RngState::derive(seed, INIT_STREAM))?;
    let last = format!("head_{}.weight", model.head.len());
    let zeros = Tensor::zeros(w.get(&last)?.shape());
    w.insert(last, zeros);
    Ok(w)
}
