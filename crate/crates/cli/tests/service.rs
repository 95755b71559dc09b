mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::*;
use fundus_cli::service::{self, ServiceConfig};
use fundus_core::model::{ModelConfig, ModelWeights};
use fundus_core::data::NormalizationStats;
use fundus_cli::engine::InferenceEngine;

fn tiny() -> ModelConfig {
    ModelConfig::preset("tiny").unwrap()
}

#[tokio::test]
async fn fifty_mixed_uploads_follow_the_gate() {
    let samples = rendered(3, 50, 64);
    let app = app(balanced_engine(&tiny(), &samples, 11), &ServiceConfig::default());
    let (pos, neg) = mixed_uploads(&app, &samples, 32).await.unwrap();
    assert_eq!(pos + neg, 50);
    assert!(pos >= 10 && neg >= 10, "{pos} glaucoma / {neg} normal");
}

#[tokio::test]
async fn malformed_uploads_get_typed_errors() {
    let samples = rendered(3, 4, 64);
    let app = app(balanced_engine(&tiny(), &samples, 11), &small_limit_config());
    check_malformed(&app).await.unwrap();
}

#[tokio::test]
async fn identical_bytes_give_identical_json() {
    let samples = rendered(5, 4, 64);
    let app = app(balanced_engine(&tiny(), &samples, 2), &ServiceConfig::default());
    let png = encode(&samples[1], image::ImageFormat::Png);
    let (_, mut a) = call(&app, predict_request(multipart("image", "a.png", "image/png", &png))).await;
    let (_, mut b) = call(&app, predict_request(multipart("image", "b.png", "image/png", &png))).await;
    a["elapsed_ms"] = 0.into();
    b["elapsed_ms"] = 0.into();
    assert_eq!(a, b);
}

#[tokio::test]
async fn health_and_model_metadata() {
    let model = tiny();
    let weights = ModelWeights::zeros(&model).unwrap();
    let engine = InferenceEngine::new(model.clone(), weights, NormalizationStats::default()).unwrap();
    let id = engine.model_id.clone();
    let checksum = format!("{:08x}", engine.checksum);
    let app = app(engine, &ServiceConfig::default());

    let get = |p: &str| Request::get(p).body(Body::empty()).unwrap();
    let (s, h) = call(&app, get("/api/v1/health")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["status"], "ok");
    assert_eq!(h["model_id"], id.as_str());
    assert!(h["uptime_s"].as_f64().unwrap() >= 0.0);

    let (s, m1) = call(&app, get("/api/v1/model")).await;
    let (_, m2) = call(&app, get("/api/v1/model")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m1, m2);
    assert_eq!(m1["model_id"], id.as_str());
    assert_eq!(m1["config_name"], model.variant_name.as_str());
    assert_eq!(m1["input_size"], 32);
    assert_eq!(m1["class_names"], serde_json::json!(["normal", "glaucoma"]));
    assert_eq!(m1["weight_checksum"], checksum.as_str());
}

#[test]
fn full_scale_config_reports_224() {
    assert_eq!(ModelConfig::preset("vgg16").unwrap().input_size, 224);
}

#[tokio::test]
async fn zero_weights_predict_normal_without_heatmap() {
    let model = tiny();
    let engine = InferenceEngine::new(model.clone(), ModelWeights::zeros(&model).unwrap(), NormalizationStats::default()).unwrap();
    let app = app(engine, &ServiceConfig::default());
    let s = &rendered(1, 2, 64)[1];
    let (status, body) = call(&app, predict_request(multipart("image", "g.png", "image/png", &encode(s, image::ImageFormat::Png)))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!check_predict_schema(&body, 32).unwrap());
    assert_eq!(body["probability_glaucoma"], 0.5);
}

#[tokio::test]
async fn cors_allows_configured_origin() {
    let model = tiny();
    let engine = InferenceEngine::new(model.clone(), ModelWeights::zeros(&model).unwrap(), NormalizationStats::default()).unwrap();
    let cfg = ServiceConfig { cors_origins: vec!["http://localhost:5173".into()], ..Default::default() };
    let app = app(engine, &cfg);
    let req = Request::get("/api/v1/health").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = tower::ServiceExt::oneshot(app, req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

#[tokio::test]
async fn serve_refuses_to_start_without_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig { weights: dir.path().join("missing.mdnw"), model: Some("tiny".into()), ..Default::default() };
    assert!(service::serve(cfg).await.is_err());
}

#[test]
fn config_file_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("svc.json");
    std::fs::write(&p, r#"{"bind": "0.0.0.0:9000", "weights": "w.mdnw"}"#).unwrap();
    let cfg = ServiceConfig::load(&p).unwrap();
    assert_eq!(cfg.bind, "0.0.0.0:9000");
    assert_eq!(cfg.max_upload_bytes, 16 * 1024 * 1024);
    assert_eq!(cfg.max_concurrent, 8);
}
