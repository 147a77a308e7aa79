use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

use turbo_i2i::checkpoint::save_generator;
use turbo_i2i::generator::{AdapterSpec, GeneratorConfig, GeneratorState};
use turbo_i2i::service::{
    router, AppState, Health, LoadedModel, ModelInfo, ServiceConfig, TranslateResponse,
};
use turbo_i2i::types::TensorImage;

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

fn app_with(config: ServiceConfig) -> (axum::Router, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut s = GeneratorState::new_random(GeneratorConfig::tiny()).unwrap();
    s.pretrained = true;
    s.attach_adapters(AdapterSpec::default()).unwrap();
    let ck = dir.path().join("toy");
    save_generator(&s, None, &ck, Some("toy")).unwrap();
    let state = AppState::new(vec![LoadedModel::load(&ck).unwrap()], config).unwrap();
    (router(state), dir)
}

fn app() -> (axum::Router, tempfile::TempDir) {
    app_with(ServiceConfig::default())
}

fn png_b64(size: usize) -> String {
    let img = TensorImage::filled(size, size, [0.2, -0.1, 0.5]).unwrap();
    B64.encode(img.to_png_bytes().unwrap())
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body)
}

fn post(body: impl Into<Body>) -> Request<Body> {
    Request::post("/translate")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap()
}

fn translate_req(size: usize, gamma: f64, seed: u64) -> Request<Body> {
    let body = serde_json::json!({ "image": png_b64(size), "domain": "night", "gamma": gamma, "seed": seed });
    post(body.to_string())
}

#[tokio::test]
async fn valid_request_returns_same_size_image() {
    let (app, _d) = app();
    let (status, body) = call(&app, translate_req(64, 1.0, 3)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: TranslateResponse = serde_json::from_slice(&body).unwrap();
    let out = TensorImage::from_png_bytes(&B64.decode(r.image).unwrap()).unwrap();
    assert_eq!((out.height(), out.width()), (64, 64));
    assert_eq!((r.gamma, r.seed), (1.0, 3));
    assert!(r.latency_ms >= 0.0);
}

#[tokio::test]
async fn gamma_one_ignores_seed() {
    let (app, _d) = app();
    let (_, a) = call(&app, translate_req(32, 1.0, 1)).await;
    let (_, b) = call(&app, translate_req(32, 1.0, 2)).await;
    let a: TranslateResponse = serde_json::from_slice(&a).unwrap();
    let b: TranslateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(a.image, b.image);
}

#[tokio::test]
async fn bad_requests_are_400() {
    let (app, _d) = app();
    assert_eq!(
        call(&app, translate_req(32, 1.5, 0)).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        call(&app, post("{not json")).await.0,
        StatusCode::BAD_REQUEST
    );
    let odd = serde_json::json!({ "image": png_b64(12), "domain": "night" });
    assert_eq!(
        call(&app, post(odd.to_string())).await.0,
        StatusCode::BAD_REQUEST
    );
    let dom = serde_json::json!({ "image": png_b64(16), "domain": "winter" });
    let (status, body) = call(&app, post(dom.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("winter"));
    let garbage = serde_json::json!({ "image": "@@@", "domain": "night" });
    assert_eq!(
        call(&app, post(garbage.to_string())).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn oversized_bodies_and_images_are_413() {
    let (app, _d) = app_with(ServiceConfig {
        max_request_bytes: 1024,
        max_image_side: 32,
    });
    let big = serde_json::json!({ "image": "A".repeat(4096), "domain": "night" });
    assert_eq!(
        call(&app, post(big.to_string())).await.0,
        StatusCode::PAYLOAD_TOO_LARGE
    );
    let (app, _d) = app_with(ServiceConfig {
        max_request_bytes: 1 << 20,
        max_image_side: 32,
    });
    assert_eq!(
        call(&app, translate_req(64, 1.0, 0)).await.0,
        StatusCode::PAYLOAD_TOO_LARGE
    );
}

#[tokio::test]
async fn health_and_models_match_manifest() {
    let (app, dir) = app();
    let m = turbo_i2i::checkpoint::Manifest::read(&dir.path().join("toy")).unwrap();
    let (s, body) = call(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.model_id, "toy");
    assert_eq!(h.config_hash, m.config_hash);
    let (_, body) = call(&app, Request::get("/models").body(Body::empty()).unwrap()).await;
    let ms: Vec<ModelInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(ms.len(), 1);
    assert_eq!(ms[0].domains, vec!["day".to_string(), "night".to_string()]);
    assert!(ms[0].adapted);
}

#[tokio::test]
async fn serving_leaves_checkpoint_untouched() {
    let (app, dir) = app();
    let ck = dir.path().join("toy");
    let before = turbo_i2i::checkpoint::digest(&ck).unwrap();
    for seed in 0..3 {
        call(&app, translate_req(16, 0.5, seed)).await;
    }
    assert_eq!(turbo_i2i::checkpoint::digest(&ck).unwrap(), before);
}
