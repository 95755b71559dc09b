//! One PASS/FAIL line per acceptance criterion, written straight to the
//! process stdout so it shows even when the harness captures output. The
//! test fails if any line fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fundus_cli::engine::InferenceEngine;
use fundus_cli::service::{router, ServiceConfig};
use fundus_core::autodiff::gradcheck::{standard_suite, FD_STEP};
use fundus_core::autodiff::kernels::conv2d_forward;
use fundus_core::data::synthetic::manifest_path;
use fundus_core::data::{generate_synthetic_corpus, load_manifest, AugmentConfig, Dataset, Split, SyntheticConfig};
use fundus_core::gradcam::{gradcam_map, localize, pointing_game_eval, OverlayConfig};
use fundus_core::metrics::{basic_metrics, evaluate, roc_auc, ConfusionCounts};
use fundus_core::model::{ModelConfig, ModelWeights};
use fundus_core::train::{
    adam_step, cross_validate, evaluate_dataset, fit_with_early_stopping, initial_weights, AdamConfig, AdamState,
    TrainConfig, TrainReport, CHECKPOINT_FILE, EPOCHS_FILE,
};
use fundus_core::{Class, RngState, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Table {
    rows: Vec<(String, bool, String)>,
}

impl Table {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let (ok, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let detail = format!("{detail} [{:.1}s]", start.elapsed().as_secs_f64());
        report(&format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
        self.rows.push((name.into(), ok, detail));
    }
}

// ---------------------------------------------------------------- oracles

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (iy, ix) = ((y * stride + i) as isize - pad as isize, (xx * stride + j) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn pairwise_auc(scores: &[f64], labels: &[Class]) -> f64 {
    let (mut wins, mut ties, mut p, mut n) = (0u64, 0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == Class::Glaucoma {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == Class::Normal {
                if scores[i] > scores[j] {
                    wins += 1;
                } else if scores[i] == scores[j] {
                    ties += 1;
                }
            }
        }
    }
    (wins as f64 + 0.5 * ties as f64) / (p * n) as f64
}

fn oracles() -> Outcome {
    let mut rng = RngState::new(77);
    let mut conv_err = 0f64;
    for &(stride, pad, k) in &[(1, 1, 3), (1, 0, 3), (2, 0, 2), (2, 1, 3), (1, 0, 1)] {
        let x = Tensor::<f64>::normal(&[2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::normal(&[4, 3, k, k], 1.0, &mut rng);
        let b = Tensor::<f64>::normal(&[4], 1.0, &mut rng);
        let (y, _) = conv2d_forward(&x, &w, &b, stride, pad).map_err(err)?;
        let want = conv_oracle(&x, &w, &b, stride, pad);
        ensure(y.len() == want.len(), || "conv output size".into())?;
        conv_err = y.data().iter().zip(&want).fold(conv_err, |m, (a, b)| m.max((a - b).abs()));
    }
    ensure(conv_err <= 1e-12, || format!("conv2d max error {conv_err:e}"))?;

    let cfg = AdamConfig { learning_rate: 3e-3, ..Default::default() };
    let mut params = ModelWeights::from_map(BTreeMap::from([("w".to_string(), Tensor::<f64>::normal(&[6], 1.0, &mut rng))]));
    let mut theta: Vec<f64> = params.get("w").unwrap().data().to_vec();
    let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
    let mut state = AdamState::new();
    let mut adam_err = 0f64;
    for t in 1..=200 {
        let g: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![6], g.clone()).unwrap())]);
        adam_step(&mut params, &grads, &mut state, &cfg).map_err(err)?;
        for i in 0..6 {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
        let got = params.get("w").unwrap().data();
        adam_err = got.iter().zip(&theta).fold(adam_err, |e, (a, b)| e.max((a - b).abs()));
    }
    ensure(adam_err <= 1e-9, || format!("adam max error {adam_err:e}"))?;

    let mut with_ties = 0;
    for inst in 0..200 {
        let n = 2 + rng.below(60);
        let levels = 1 + rng.below(10);
        let mut labels: Vec<Class> = (0..n).map(|_| if rng.bernoulli(0.5) { Class::Glaucoma } else { Class::Normal }).collect();
        labels[0] = Class::Normal;
        labels[1] = Class::Glaucoma;
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        with_ties += usize::from(distinct.len() < n);
        let (auc, _) = roc_auc(&scores, &labels).map_err(err)?;
        let want = pairwise_auc(&scores, &labels);
        ensure(auc == want, || format!("instance {inst}: trapezoid {auc} vs pairwise {want}"))?;
    }
    ensure(with_ties > 100, || format!("only {with_ties} instances had ties"))?;
    Ok(format!("conv2d err {conv_err:.1e}; adam err {adam_err:.1e} over 200 steps; AUC exact on 200 instances ({with_ties} with ties)"))
}

fn metric_fixtures() -> Outcome {
    let r = evaluate(&[0.1, 0.4, 0.35, 0.8], &[Class::Normal, Class::Normal, Class::Glaucoma, Class::Glaucoma]).map_err(err)?;
    ensure(r.auc == 0.75, || format!("auc {}", r.auc))?;
    let b = basic_metrics(&ConfusionCounts { tp: 9, fp: 1, fn_: 1, tn: 9 });
    ensure(b.precision == 0.9 && b.recall == 0.9 && b.f1 == 0.9, || format!("{b:?}"))?;
    Ok("AUC 0.75; precision = recall = F1 = 0.9".into())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = standard_suite(2024, 12).map_err(err)?;
    let elapsed = start.elapsed();
    let mut worst = 0f64;
    let mut trials = 0;
    for r in &results {
        ensure(r.checked > 0, || format!("{} checked nothing", r.name))?;
        ensure(r.skipped * 20 <= r.checked + r.skipped, || format!("{} skipped {} kinks", r.name, r.skipped))?;
        worst = worst.max(r.max_rel_error);
        trials += if r.name == "tiny_model" { 3 } else { 12 };
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    ensure(trials >= 100, || format!("{trials} trials"))?;
    ensure(FD_STEP == 1e-4, || "step".into())?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{} checks, {trials} trials, max rel error {worst:.1e}", results.len()))
}

// ---------------------------------------------------------------- end to end

struct Trained {
    model: ModelConfig,
    cfg: TrainConfig,
    weights: ModelWeights<f32>,
    test: Dataset,
}

fn corpus_config() -> SyntheticConfig {
    SyntheticConfig { train: 800, val: 200, test: 200, seed: 1, ..Default::default() }
}

fn load(dir: &Path, split: Split, size: u32) -> Result<Dataset, String> {
    Dataset::load(&load_manifest(manifest_path(dir, split)).map_err(err)?, size).map_err(err)
}

fn end_to_end(dir: &Path, slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    generate_synthetic_corpus(&corpus_config(), dir.join("corpus")).map_err(err)?;
    let model = ModelConfig::tiny_at(64);
    let corpus = dir.join("corpus");
    let (train, val, test) = (load(&corpus, Split::Train, 64)?, load(&corpus, Split::Val, 64)?, load(&corpus, Split::Test, 64)?);
    ensure(train.len() == 800 && val.len() == 200 && test.len() == 200, || "split sizes".into())?;
    let count_pos = |d: &Dataset| d.samples.iter().filter(|s| s.label == Class::Glaucoma).count();
    ensure(count_pos(&train) == 400 && count_pos(&test) == 100, || "class balance".into())?;
    let cfg = TrainConfig {
        seed: 1,
        max_epochs: 120,
        patience: 10,
        augment: Some(AugmentConfig { brightness_sigma: 0.0, ..Default::default() }),
        checkpoint_dir: Some(dir.join("run")),
        ..Default::default()
    };
    let out = fit_with_early_stopping(&cfg, &model, initial_weights(&model, 1).map_err(err)?, &train, &val).map_err(err)?;
    let ev = evaluate_dataset(&model, &out.weights, &test, &cfg.normalization, 32).map_err(err)?;
    let report = evaluate(&ev.scores(), &ev.labels).map_err(err)?;
    let elapsed = start.elapsed();
    let TrainReport { best_epoch, stop_epoch, stopped_early, .. } = out.report;
    *slot = Some(Trained { model, cfg: cfg.clone(), weights: out.weights, test });
    let detail = format!(
        "test accuracy {:.3}, AUC {:.4}, best epoch {best_epoch}, stopped at {stop_epoch}/{}, {:.0}s",
        report.accuracy,
        report.auc,
        cfg.max_epochs,
        elapsed.as_secs_f64()
    );
    ensure(report.accuracy >= 0.95, || detail.clone())?;
    ensure(report.auc >= 0.97, || detail.clone())?;
    ensure(stopped_early && stop_epoch < cfg.max_epochs, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(15 * 60), || detail.clone())?;
    Ok(detail)
}

fn trained(slot: &Option<Trained>) -> Result<&Trained, String> {
    slot.as_ref().ok_or_else(|| "no trained model (end-to-end run failed)".to_string())
}

fn localization(slot: &Option<Trained>) -> Outcome {
    let k2 = gradcam_map(&[1., 0., 0., 0., 0., 2., 0., 0.], &[1., 1., 1., 1., -0.5, -0.5, -0.5, -0.5], 2, 2, 2).map_err(err)?;
    let want = [1.0, 0.0, 0.0, 0.0];
    let fixture_err = k2.iter().zip(want).fold(0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure(fixture_err <= 1e-6, || format!("K=2 fixture {k2:?}"))?;

    let t = trained(slot)?;
    let (mut heatmaps, mut masks) = (Vec::new(), Vec::new());
    let mut positives = 0;
    for s in t.test.samples.iter().filter(|s| s.label == Class::Glaucoma) {
        positives += 1;
        let r = localize(&t.model, &t.weights, s, &t.cfg.normalization, &OverlayConfig::default()).map_err(err)?;
        if let Some(h) = r.heatmap {
            heatmaps.push(h);
            masks.push(s.lesion_mask.clone().ok_or("positive without mask")?);
        }
    }
    let p = pointing_game_eval(&heatmaps, &masks).map_err(err)?;
    let detail = format!(
        "pointing game {}/{} = {:.3} over predicted positives ({}/{} counting unlocalized positives as misses); K=2 fixture err {fixture_err:.0e}",
        p.hits, p.evaluated, p.rate, p.hits, positives
    );
    ensure(p.rate >= 0.80, || detail.clone())?;
    Ok(detail)
}

fn gate(slot: &Option<Trained>) -> Outcome {
    let t = trained(slot)?;
    let (mut normal, mut glaucoma, mut violations) = (0, 0, 0);
    for s in &t.test.samples {
        let r = localize(&t.model, &t.weights, s, &t.cfg.normalization, &OverlayConfig::default()).map_err(err)?;
        let has_output = r.heatmap.is_some() || r.overlay.is_some() || r.gated;
        match r.prediction.class {
            Class::Normal => {
                normal += 1;
                violations += usize::from(has_output);
            }
            Class::Glaucoma => {
                glaucoma += 1;
                ensure(r.heatmap.is_some() && r.overlay.is_some(), || format!("{} missing heatmap", s.id))?;
            }
        }
    }
    ensure(violations == 0 && normal > 0, || format!("{violations} outputs for {normal} normal predictions"))?;
    Ok(format!("{normal} normal predictions with no output, {glaucoma} glaucoma predictions all localized"))
}

fn cross_validation(dir: &Path) -> Outcome {
    let cfg = SyntheticConfig { train: 1080, val: 2, test: 2, extent: 64, seed: 5, ..Default::default() };
    generate_synthetic_corpus(&cfg, dir).map_err(err)?;
    let data = load(dir, Split::Train, 32)?;
    let model = ModelConfig::preset("tiny").unwrap();
    let tc = TrainConfig { num_folds: 5, max_epochs: 1, patience: 1, seed: 3, ..Default::default() };
    let report = cross_validate(&tc, &model, &data, None).map_err(|f| format!("fold {}: {}", f.fold, f.source))?;
    ensure(report.folds.len() == 5, || "fold count".into())?;
    let mut seen = BTreeSet::new();
    for f in &report.folds {
        ensure(f.val_indices.len() == 216, || format!("fold {} has {}", f.fold, f.val_indices.len()))?;
        let pos = f.val_indices.iter().filter(|&&i| data.samples[i].label == Class::Glaucoma).count();
        ensure(pos == 108, || format!("fold {} has {pos} positives", f.fold))?;
        for &i in &f.val_indices {
            ensure(seen.insert(i), || format!("index {i} in two folds"))?;
        }
    }
    ensure(seen.len() == 1080, || "folds do not cover the data".into())?;
    let lines = report.summary_lines();
    let shape = |s: &str| {
        let (mean, std) = s.split_once('±').unwrap_or(("", ""));
        let ok = |x: &str| x.len() == 4 && x.as_bytes()[1] == b'.' && x.parse::<f64>().is_ok();
        ok(mean) && ok(std)
    };
    for line in &lines[..5] {
        let value = line.split_whitespace().nth(1).unwrap_or("");
        ensure(shape(value), || format!("summary line `{line}`"))?;
    }
    Ok(format!("5 disjoint covering folds of 216 (108/108); {}", lines[..5].join(", ")))
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Corpus, checkpoint, epoch log and MetricReport JSON of one reduced run.
fn reproducible_run(dir: &Path) -> Result<(Vec<(PathBuf, Vec<u8>)>, Vec<u8>, Vec<u8>, String), String> {
    let corpus = dir.join("corpus");
    let cfg = SyntheticConfig { train: 64, val: 32, test: 32, extent: 96, seed: 42, ..Default::default() };
    generate_synthetic_corpus(&cfg, &corpus).map_err(err)?;
    let model = ModelConfig::preset("tiny").unwrap();
    let (train, val, test) = (load(&corpus, Split::Train, 32)?, load(&corpus, Split::Val, 32)?, load(&corpus, Split::Test, 32)?);
    let tc = TrainConfig { seed: 42, max_epochs: 3, batch_size: 16, checkpoint_dir: Some(dir.join("run")), ..Default::default() };
    let out = fit_with_early_stopping(&tc, &model, initial_weights(&model, 42).map_err(err)?, &train, &val).map_err(err)?;
    let ev = evaluate_dataset(&model, &out.weights, &test, &tc.normalization, 16).map_err(err)?;
    let json = evaluate(&ev.scores(), &ev.labels).map_err(err)?.to_json().map_err(err)?;
    let read = |f: &str| std::fs::read(dir.join("run").join(f)).map_err(err);
    Ok((files(&corpus), read(CHECKPOINT_FILE)?, read(EPOCHS_FILE)?, json))
}

fn reproducibility(dir: &Path) -> Outcome {
    let a = reproducible_run(&dir.join("a"))?;
    let b = reproducible_run(&dir.join("b"))?;
    ensure(a.0 == b.0, || "corpora differ".into())?;
    ensure(a.1 == b.1, || "checkpoints differ".into())?;
    ensure(a.2 == b.2, || "epoch logs differ".into())?;
    ensure(a.3 == b.3, || "MetricReport JSON differs".into())?;
    Ok(format!("{} corpus files, {}-byte checkpoint, {}-byte report identical across two runs", a.0.len(), a.1.len(), a.3.len()))
}

fn service_contract(slot: &Option<Trained>) -> Outcome {
    let t = trained(slot)?;
    let engine = Arc::new(InferenceEngine::new(t.model.clone(), t.weights.clone(), t.cfg.normalization).map_err(err)?);
    let uploads = common::rendered(corpus_config().seed, 50, corpus_config().extent);
    let rt = tokio::runtime::Runtime::new().map_err(err)?;
    rt.block_on(async {
        let app = router(engine.clone(), &ServiceConfig::default());
        let (pos, neg) = common::mixed_uploads(&app, &uploads, t.model.input_size as u32).await?;
        ensure(pos > 0 && neg > 0, || format!("uploads not mixed: {pos}/{neg}"))?;
        let limited = router(engine, &common::small_limit_config());
        common::check_malformed(&limited).await?;
        Ok(format!(
            "50 uploads (PNG and JPEG): {pos} glaucoma with heatmap, {neg} normal without; {} malformed cases typed 400/413/415",
            common::malformed_cases().len()
        ))
    })
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut table = Table { rows: Vec::new() };
    let mut model = None;
    table.run("gradient correctness", gradients);
    table.run("oracle equivalence", oracles);
    table.run("metric fixtures", metric_fixtures);
    table.run("synthetic end-to-end", || end_to_end(&tmp.path().join("e2e"), &mut model));
    table.run("localization", || localization(&model));
    table.run("gate property", || gate(&model));
    table.run("cross-validation properties", || cross_validation(&tmp.path().join("cv")));
    table.run("reproducibility", || reproducibility(&tmp.path().join("repro")));
    table.run("service contract", || service_contract(&model));

    report("\nacceptance summary");
    for (name, ok, detail) in &table.rows {
        report(&format!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<_> = table.rows.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
