use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fundus_core::data::{
    generate_synthetic_corpus, load_manifest, AugmentConfig, Dataset, DatasetManifest, SyntheticConfig,
};
use fundus_core::gradcam::{mask_iou, pointing_game_eval, LocalizationResult};
use fundus_core::metrics::{evaluate, roc_to_csv, MetricReport};
use fundus_core::model::{container, load_weights_permissive, ModelConfig, ModelWeights};
use fundus_core::rng::RngState;
use fundus_core::train::{
    cross_validate, epochs_from_csv, evaluate_dataset, fit_with_early_stopping, initial_weights, TrainConfig,
    INIT_STREAM,
};
use fundus_core::Class;
use serde_json::json;

use crate::engine::{resolve_model, InferenceEngine};
use crate::service::{self, ServiceConfig};
use crate::{curves, CliError};

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "fundus", version, about = "Glaucoma screening on fundus images: training, evaluation, inference and service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a seeded synthetic fundus corpus with lesion masks.
    Synth(SynthArgs),
    /// Train with early stopping on a validation manifest.
    Train(TrainArgs),
    /// Stratified k-fold cross-validation.
    Cv(CvArgs),
    /// Metrics for a manifest and a checkpoint.
    Eval(EvalArgs),
    /// Predict one image, with Grad-CAM outputs when glaucoma is predicted.
    Infer(InferArgs),
    /// SVG loss, accuracy and ROC plots.
    Curves(CurvesArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub extent: Option<u32>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AugmentMode {
    /// Crop, flip and brightness.
    Full,
    /// Crop and flip only.
    Geometric,
    None,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingOptions {
    /// TrainConfig JSON used as the base; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset (tiny, tiny64, vgg16) or model config JSON.
    #[arg(long, default_value = "tiny64")]
    pub model: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub augment: Option<AugmentMode>,
    /// Start from these weights; parameters that do not match are freshly initialized.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Optional held-out manifest evaluated with the restored weights.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainingOptions,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    #[command(flatten)]
    pub opts: TrainingOptions,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Preset or JSON; defaults to the checkpoint sidecar.
    #[arg(long)]
    pub model: Option<String>,
    /// MetricReport JSON destination; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-image scores as CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub roc_csv: Option<PathBuf>,
    /// Pointing game, mask IoU and gate audit over the manifest.
    #[arg(long)]
    pub localization: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    /// Grayscale heatmap PNG, written only when glaucoma is predicted.
    #[arg(long)]
    pub gradcam_out: Option<PathBuf>,
    /// Overlay PNG, written only when glaucoma is predicted.
    #[arg(long)]
    pub overlay_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    /// epochs.csv from `train`.
    #[arg(long)]
    pub epochs: Option<PathBuf>,
    /// MetricReport JSON from `eval` for the ROC plot.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// ServiceConfig JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub bind: Option<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Curves(a) => curves_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        train: a.train.unwrap_or(d.train),
        val: a.val.unwrap_or(d.val),
        test: a.test.unwrap_or(d.test),
        extent: a.extent.unwrap_or(d.extent),
        seed: a.seed,
        ..d
    };
    let corpus = generate_synthetic_corpus(&cfg, &a.out)?;
    let counts = |m: &DatasetManifest| {
        let (n, g) = m.class_counts();
        json!({ "normal": n, "glaucoma": g })
    };
    println!(
        "{}",
        to_json(&json!({
            "out": a.out,
            "seed": cfg.seed,
            "train": counts(&corpus.train),
            "val": counts(&corpus.val),
            "test": counts(&corpus.test),
        }))?
    );
    Ok(())
}

fn training_setup(o: &TrainingOptions, out: &Path) -> CliResult<(TrainConfig, ModelConfig)> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.max_epochs = o.epochs.unwrap_or(cfg.max_epochs);
    cfg.patience = o.patience.unwrap_or(cfg.patience);
    cfg.min_delta = o.min_delta.unwrap_or(cfg.min_delta);
    cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
    cfg.adam.learning_rate = o.lr.unwrap_or(cfg.adam.learning_rate);
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    if let Some(mode) = o.augment {
        cfg.augment = match mode {
            AugmentMode::Full => Some(AugmentConfig::default()),
            AugmentMode::Geometric => Some(AugmentConfig { brightness_sigma: 0.0, ..Default::default() }),
            AugmentMode::None => None,
        };
    }
    cfg.checkpoint_dir = Some(out.to_path_buf());
    cfg.validate()?;
    let (model, stats) = resolve_model(Some(&o.model), out)?;
    cfg.normalization = stats;
    model.validate()?;
    Ok((cfg, model))
}

fn starting_weights(o: &TrainingOptions, model: &ModelConfig, seed: u64) -> CliResult<ModelWeights<f32>> {
    match &o.init {
        None => Ok(initial_weights(model, seed)?),
        Some(p) => {
            let (w, report) = load_weights_permissive(p, model, &mut RngState::derive(seed, INIT_STREAM))?;
            log::info!(
                "imported {} parameters from {}; fresh: {:?}; ignored: {:?}",
                report.loaded.len(),
                p.display(),
                report.fresh_layers(),
                report.ignored
            );
            Ok(w)
        }
    }
}

fn load_dataset(path: &Path, model: &ModelConfig) -> CliResult<Dataset> {
    let manifest = load_manifest(path)?;
    Ok(Dataset::load(&manifest, model.input_size as u32)?)
}

fn train(a: TrainArgs) -> CliResult {
    let (cfg, model) = training_setup(&a.opts, &a.out)?;
    let (train, val) = (load_dataset(&a.train, &model)?, load_dataset(&a.val, &model)?);
    log::info!("{} training / {} validation images, model {}", train.len(), val.len(), model.variant_name);
    let init = starting_weights(&a.opts, &model, cfg.seed)?;
    let out = fit_with_early_stopping(&cfg, &model, init, &train, &val)?;
    write(&a.out.join("train_config.json"), to_json(&cfg)?)?;
    write(&a.out.join("report.json"), to_json(&out.report)?)?;
    let mut summary = json!({
        "checkpoint": out.report.checkpoint_path,
        "checkpoint_id": out.report.checkpoint_id,
        "best_epoch": out.report.best_epoch,
        "stop_epoch": out.report.stop_epoch,
        "stopped_early": out.report.stopped_early,
        "best_val_loss": out.report.best_val_loss,
    });
    if let Some(test) = &a.test {
        let ds = load_dataset(test, &model)?;
        let ev = evaluate_dataset(&model, &out.weights, &ds, &cfg.normalization, cfg.batch_size)?;
        let report = evaluate(&ev.scores(), &ev.labels)?;
        write(&a.out.join("test_metrics.json"), report.to_json()?)?;
        summary["test_accuracy"] = json!(report.accuracy);
        summary["test_auc"] = json!(report.auc);
    }
    println!("{}", to_json(&summary)?);
    Ok(())
}

fn cv(a: CvArgs) -> CliResult {
    let (mut cfg, model) = training_setup(&a.opts, &a.out)?;
    cfg.num_folds = a.folds.unwrap_or(cfg.num_folds);
    let data = load_dataset(&a.manifest, &model)?;
    let base = match &a.opts.init {
        Some(_) => Some(starting_weights(&a.opts, &model, cfg.seed)?),
        None => None,
    };
    match cross_validate(&cfg, &model, &data, base.as_ref()) {
        Ok(report) => {
            for f in &report.folds {
                write(&a.out.join(format!("fold_{}", f.fold)).join("metrics.json"), f.metrics.to_json()?)?;
            }
            write(&a.out.join("cv_report.json"), to_json(&report)?)?;
            for line in report.summary_lines() {
                println!("{line}");
            }
            Ok(())
        }
        Err(failure) => {
            write(&a.out.join("cv_partial.json"), to_json(&json!({ "failed_fold": failure.fold, "error": failure.source.to_string(), "completed": failure.completed }))?)?;
            Err(CliError::from(failure.source))
        }
    }
}

/// Gate audit and localization scores over every sample of `ds`.
fn localization_report(engine: &InferenceEngine, ds: &Dataset) -> CliResult<serde_json::Value> {
    let mut heatmaps = Vec::new();
    let mut masks = Vec::new();
    let mut ious = Vec::new();
    let (mut gated, mut violations) = (0usize, 0usize);
    for s in &ds.samples {
        let r: LocalizationResult = engine.run(s)?;
        if r.heatmap.is_some() && r.prediction.class == Class::Normal {
            violations += 1;
        }
        let Some(hm) = r.heatmap else { continue };
        gated += 1;
        if let (Class::Glaucoma, Some(m)) = (s.label, &s.lesion_mask) {
            ious.push(mask_iou(&hm, m, 0.5)?);
            heatmaps.push(hm);
            masks.push(m.clone());
        }
    }
    let pointing = pointing_game_eval(&heatmaps, &masks)?;
    Ok(json!({
        "samples": ds.len(),
        "gated": gated,
        "gate_violations": violations,
        "pointing_game": pointing,
        "mean_iou_at_0_5": if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
    }))
}

fn eval(a: EvalArgs) -> CliResult {
    let engine = InferenceEngine::load(&a.weights, a.model.as_deref())?;
    let manifest = load_manifest(&a.manifest)?;
    let ds = Dataset::load(&manifest, engine.model.input_size as u32)?;
    let ev = evaluate_dataset(&engine.model, &engine.weights, &ds, &engine.stats, a.batch_size.max(1))?;
    let scores = ev.scores();
    let report: MetricReport = evaluate(&scores, &ev.labels)?;
    let text = report.to_json()?;
    match &a.out {
        Some(p) => write(p, &text)?,
        None => println!("{text}"),
    }
    if let Some(p) = &a.predictions {
        let mut csv = String::from("image,label,p_glaucoma\n");
        for (i, s) in scores.iter().enumerate() {
            csv.push_str(&format!("{},{},{s}\n", manifest.records[i].image.display(), ev.labels[i].name()));
        }
        write(p, csv)?;
    }
    if let Some(p) = &a.roc_csv {
        write(p, roc_to_csv(&report.roc))?;
    }
    if let Some(p) = &a.localization {
        write(p, to_json(&localization_report(&engine, &ds)?)?)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> CliResult {
    let engine = InferenceEngine::load(&a.weights, a.model.as_deref())?;
    let bytes = std::fs::read(&a.image).map_err(|e| io_err(&a.image, e))?;
    let sample = engine.preprocess(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", a.image.display())))?;
    let r = engine.run(&sample)?;
    let mut written = serde_json::Map::new();
    if let (Some(p), Some(hm)) = (&a.gradcam_out, &r.heatmap) {
        write(p, fundus_core::data::image_ops::encode_png_gray(&fundus_core::gradcam::heatmap_to_gray(hm))?)?;
        written.insert("heatmap".into(), json!(p));
    }
    if let (Some(p), Some(ov)) = (&a.overlay_out, &r.overlay) {
        write(p, fundus_core::data::image_ops::encode_png_rgb(ov)?)?;
        written.insert("overlay".into(), json!(p));
    }
    let note = (!r.gated && (a.gradcam_out.is_some() || a.overlay_out.is_some()))
        .then_some("predicted normal: Grad-CAM is only produced for glaucoma predictions, no heatmap written");
    println!(
        "{}",
        to_json(&json!({
            "image": a.image,
            "probability_glaucoma": r.prediction.p_glaucoma,
            "predicted_class": r.prediction.class,
            "model_id": engine.model_id,
            "written": written,
            "note": note,
        }))?
    );
    Ok(())
}

fn curves_cmd(a: CurvesArgs) -> CliResult {
    if a.epochs.is_none() && a.metrics.is_none() {
        return Err(CliError::Usage("give --epochs and/or --metrics".into()));
    }
    if let Some(p) = &a.epochs {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let epochs = epochs_from_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        write(&a.out.join("loss.svg"), curves::loss_chart(&epochs))?;
        write(&a.out.join("accuracy.svg"), curves::accuracy_chart(&epochs))?;
    }
    if let Some(p) = &a.metrics {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let report: MetricReport =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        write(&a.out.join("roc.svg"), curves::roc_chart(&report.roc, report.auc))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => ServiceConfig::default(),
    };
    if let Some(w) = a.weights {
        cfg.weights = w;
    }
    if a.model.is_some() {
        cfg.model = a.model;
    }
    if let Some(b) = a.bind {
        cfg.bind = b;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(service::serve(cfg)).map_err(|e| match e.downcast::<fundus_core::Error>() {
        Ok(core) => CliError::from(core),
        Err(other) => CliError::Runtime(other.to_string()),
    })
}

/// Checksum of a weight file, for reports.
pub fn weight_checksum(path: &Path) -> CliResult<u32> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(container::checksum(&bytes)?)
}
