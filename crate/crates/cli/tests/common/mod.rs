#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine as _;
use fundus_cli::engine::InferenceEngine;
use fundus_cli::service::{router, ServiceConfig};
use fundus_core::data::{center_crop_resize, Dataset, ImageSample, NormalizationStats};
use fundus_core::model::{predict_proba, ModelConfig, ModelWeights};
use fundus_core::RngState;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const BOUNDARY: &str = "fundus-test-boundary";

pub fn multipart(field: &str, filename: &str, content_type: &str, bytes: &[u8]) -> Vec<u8> {
    let mut body = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"{filename}\"\r\nContent-Type: {content_type}\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn predict_request(body: Vec<u8>) -> Request<Body> {
    Request::post("/api/v1/predict")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

pub async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

pub fn app(engine: InferenceEngine, cfg: &ServiceConfig) -> axum::Router {
    router(Arc::new(engine), cfg)
}

/// Random weights for `model` with the glaucoma bias shifted so half of
/// `samples` (raw images, cropped here as the service would) are predicted
/// glaucomatous.
pub fn balanced_engine(model: &ModelConfig, samples: &[ImageSample], seed: u64) -> InferenceEngine {
    let stats = NormalizationStats::default();
    let mut weights = ModelWeights::init(model, &mut RngState::new(seed)).unwrap();
    let size = model.input_size as u32;
    let samples = samples.iter().map(|s| center_crop_resize(s, size).unwrap()).collect();
    let ds = Dataset { samples, input_size: size };
    let mut margins: Vec<f64> = (0..ds.len())
        .map(|i| {
            let p = predict_proba(model, &weights, &ds.tensor(&[i], &stats).unwrap()).unwrap()[0];
            p.p_glaucoma.ln() - p.p_normal.ln()
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    let mid = margins.len() / 2;
    let cut = (margins[mid - 1] + margins[mid]) / 2.0;
    let bias = format!("head_{}.bias", model.head.len() - 1);
    weights.get_mut(&bias).unwrap().data_mut()[1] -= cut as f32;
    InferenceEngine::new(model.clone(), weights, stats).unwrap()
}

fn png_size(b64: &str) -> (u32, u32) {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).expect("base64");
    assert_eq!(image::guess_format(&bytes).unwrap(), image::ImageFormat::Png);
    let img = image::load_from_memory(&bytes).expect("png decodes");
    (img.width(), img.height())
}

/// Checks a 200 predict body against the response schema. Returns whether
/// glaucoma was predicted.
pub fn check_predict_schema(v: &Value, input_size: u32) -> Result<bool, String> {
    let obj = v.as_object().ok_or("body is not an object")?;
    let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
    let expected: BTreeSet<&str> =
        ["probability_glaucoma", "predicted_class", "heatmap_png", "overlay_png", "model_id", "elapsed_ms"].into();
    if keys != expected {
        return Err(format!("keys {keys:?}"));
    }
    let p = v["probability_glaucoma"].as_f64().ok_or("probability not a number")?;
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("probability {p}"));
    }
    let glaucoma = match v["predicted_class"].as_str() {
        Some("glaucoma") => true,
        Some("normal") => false,
        other => return Err(format!("class {other:?}")),
    };
    if glaucoma != (p > 0.5) {
        return Err(format!("class disagrees with probability {p}"));
    }
    if !v["model_id"].is_string() || v["elapsed_ms"].as_f64().is_none_or(|t| t < 0.0) {
        return Err("model_id or elapsed_ms".into());
    }
    for key in ["heatmap_png", "overlay_png"] {
        match (&v[key], glaucoma) {
            (Value::String(s), true) => {
                if png_size(s) != (input_size, input_size) {
                    return Err(format!("{key} has the wrong size"));
                }
            }
            (Value::Null, false) => {}
            (_, g) => return Err(format!("{key} presence does not match glaucoma={g}")),
        }
    }
    Ok(glaucoma)
}

pub fn encode(sample: &ImageSample, format: image::ImageFormat) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    sample.pixels.write_to(&mut out, format).unwrap();
    out.into_inner()
}

/// Posts every sample, alternating PNG and JPEG, and checks each response.
/// Returns (glaucoma, normal) counts.
pub async fn mixed_uploads(app: &axum::Router, samples: &[ImageSample], input_size: u32) -> Result<(usize, usize), String> {
    let (mut pos, mut neg) = (0, 0);
    for (i, s) in samples.iter().enumerate() {
        let (fmt, name, ct) = if i % 2 == 0 {
            (image::ImageFormat::Png, "eye.png", "image/png")
        } else {
            (image::ImageFormat::Jpeg, "eye.jpg", "image/jpeg")
        };
        let (status, body) = call(app, predict_request(multipart("image", name, ct, &encode(s, fmt)))).await;
        if status != StatusCode::OK {
            return Err(format!("upload {i}: status {status}: {body}"));
        }
        if check_predict_schema(&body, input_size).map_err(|e| format!("upload {i}: {e}"))? {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    Ok((pos, neg))
}

/// Malformed uploads and the status and error code each must produce.
pub fn malformed_cases() -> Vec<(&'static str, Request<Body>, StatusCode, &'static str)> {
    let text = multipart("image", "notes.txt", "text/plain", b"this is not an image");
    let gif = multipart("image", "eye.gif", "image/gif", b"GIF89a\x01\x00\x01\x00\x80\x00\x00\x00\x00\x00\xff\xff\xff!\xf9\x04\x01\x00\x00\x00\x00,\x00\x00\x00\x00\x01\x00\x01\x00\x00\x02\x02D\x01\x00;");
    let truncated_png = multipart("image", "eye.png", "image/png", b"\x89PNG\r\n\x1a\n\x00\x00\x00\rIHDR\x00\x00");
    let no_field = multipart("file", "eye.png", "image/png", b"\x89PNG\r\n\x1a\n");
    let oversize = multipart("image", "big.png", "image/png", &vec![0u8; 64 * 1024]);
    let json_body = Request::post("/api/v1/predict")
        .header("content-type", "application/json")
        .body(Body::from("{\"image\":\"abc\"}"))
        .unwrap();
    let broken = Request::post("/api/v1/predict")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from("--nonsense without a terminator"))
        .unwrap();
    vec![
        ("text file", predict_request(text), StatusCode::BAD_REQUEST, "undecodable_image"),
        ("truncated png", predict_request(truncated_png), StatusCode::BAD_REQUEST, "undecodable_image"),
        ("missing image field", predict_request(no_field), StatusCode::BAD_REQUEST, "missing_image"),
        ("broken multipart", broken, StatusCode::BAD_REQUEST, "malformed_multipart"),
        ("oversize upload", predict_request(oversize), StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large"),
        ("json body", json_body, StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media_type"),
        ("gif upload", predict_request(gif), StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_image_format"),
    ]
}

/// Service config with a 32 KiB upload limit so the oversize case stays small.
pub fn small_limit_config() -> ServiceConfig {
    ServiceConfig { max_upload_bytes: 32 * 1024, ..ServiceConfig::default() }
}

pub async fn check_malformed(app: &axum::Router) -> Result<(), String> {
    for (name, req, want, code) in malformed_cases() {
        let (status, body) = call(app, req).await;
        if status != want || body["error"]["code"] != code || !body["error"]["message"].is_string() {
            return Err(format!("{name}: got {status} {body}, want {want} {code}"));
        }
    }
    Ok(())
}

/// Raw rendered synthetic test images at `extent`.
pub fn rendered(seed: u64, n: usize, extent: u32) -> Vec<ImageSample> {
    let cfg = fundus_core::data::SyntheticConfig { extent, seed, test: n, ..Default::default() };
    (0..n)
        .map(|i| {
            let r = fundus_core::data::synthetic::render_sample(&cfg, fundus_core::data::Split::Test, i);
            ImageSample::new(format!("s{i}"), r.image, r.meta.label).with_mask(r.mask).unwrap()
        })
        .collect()
}
