use serde::{Deserialize, Serialize};

use super::fit::{evaluate_dataset, fit_with_early_stopping, initial_weights, TrainConfig, TrainReport};
use super::folds::make_folds;
use crate::data::Dataset;
use crate::error::Error;
use crate::metrics::{evaluate, roc_auc, MetricReport, Summary};
use crate::model::{ModelConfig, ModelWeights};
use crate::rng::mix;
use crate::Class;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train: TrainReport,
    pub metrics: MetricReport,
    /// Indices into the input dataset held out in this fold.
    pub val_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub num_folds: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub accuracy: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    pub auc: Summary,
    /// AUC over the concatenated out-of-fold scores.
    pub pooled_auc: f64,
}

impl CvReport {
    /// Lines of the form `accuracy 0.91±0.02`.
    pub fn summary_lines(&self) -> Vec<String> {
        vec![
            format!("accuracy {}", self.accuracy),
            format!("precision {}", self.precision),
            format!("recall {}", self.recall),
            format!("f1 {}", self.f1),
            format!("auc {}", self.auc),
            format!("pooled_auc {:.4}", self.pooled_auc),
        ]
    }
}

/// A fold failed; the folds completed before it are kept.
#[derive(Debug, thiserror::Error)]
#[error("fold {fold} failed: {source}")]
pub struct CvFailure {
    pub fold: usize,
    pub completed: Vec<FoldResult>,
    #[source]
    pub source: Error,
}

/// Seed of fold `k` under base seed `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    mix(seed, fold as u64 + 1)
}

/// Stratified k-fold cross-validation. Every fold trains from `base`
/// (or fresh weights seeded per fold) with early stopping on its held-out
/// part, which also provides the fold's metrics. Checkpoints go to
/// `fold_k/` under the configured checkpoint directory.
pub fn cross_validate(
    cfg: &TrainConfig,
    model: &ModelConfig,
    dataset: &Dataset,
    base: Option<&ModelWeights<f32>>,
) -> Result<CvReport, CvFailure> {
    let fail = |fold, completed, source| CvFailure { fold, completed, source };
    let labels: Vec<Class> = dataset.samples.iter().map(|s| s.label).collect();
    let plan = make_folds(&labels, cfg.num_folds, cfg.seed).map_err(|e| fail(0, Vec::new(), e))?;
    let mut folds: Vec<FoldResult> = Vec::with_capacity(cfg.num_folds);
    for (k, fold) in plan.folds.iter().enumerate() {
        let seed = fold_seed(cfg.seed, k);
        let fold_cfg = TrainConfig {
            seed,
            checkpoint_dir: cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("fold_{k}"))),
            ..cfg.clone()
        };
        log::info!("fold {k}: {} train / {} held out", fold.train.len(), fold.val.len());
        let run = || -> crate::Result<FoldResult> {
            let init = match base {
                Some(w) => w.clone(),
                None => initial_weights(model, seed)?,
            };
            let (train, val) = (dataset.subset(&fold.train), dataset.subset(&fold.val));
            let out = fit_with_early_stopping(&fold_cfg, model, init, &train, &val)?;
            let eval = evaluate_dataset(model, &out.weights, &val, &cfg.normalization, cfg.batch_size)?;
            let scores = eval.scores();
            let metrics = evaluate(&scores, &eval.labels)?;
            Ok(FoldResult { fold: k, seed, train: out.report, metrics, val_indices: fold.val.clone(), scores })
        };
        match run() {
            Ok(r) => folds.push(r),
            Err(e) => return Err(fail(k, folds, e)),
        }
    }
    let pick = |f: fn(&MetricReport) -> f64| Summary::of(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let pooled_scores: Vec<f64> = folds.iter().flat_map(|r| r.scores.iter().copied()).collect();
    let pooled_labels: Vec<Class> = folds.iter().flat_map(|r| r.val_indices.iter().map(|&i| labels[i])).collect();
    let pooled_auc = roc_auc(&pooled_scores, &pooled_labels).map_err(|e| fail(cfg.num_folds, folds.clone(), e))?.0;
    Ok(CvReport {
        num_folds: cfg.num_folds,
        seed: cfg.seed,
        accuracy: pick(|m| m.accuracy),
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
        f1: pick(|m| m.f1),
        auc: pick(|m| m.auc),
        pooled_auc,
        folds,
    })
}
