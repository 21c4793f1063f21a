use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use noiseflow::datagen::{build_dataset, load_split, GenConfig, Split};
use noiseflow::flow::{save_checkpoint, Checkpoint, FlowConfig, FlowModel};
use noiseflow::metrics::{bench_runtime, evaluate_testset, EvalOptions};
use noiseflow::raster::LayoutMask;
use noiseflow::simulator::Scenario;
use noiseflow_service::{
    decode_map, router, sha256_hex, AppState, GridRle, Health, LoadedModel, ModelCard, WhatIfResponse,
    MODEL_MS_HEADER, SIMULATOR_MS_HEADER, VERSION,
};

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

fn stamped_model(dir: &std::path::Path, scenario: &str) -> (std::path::PathBuf, FlowModel<f32>) {
    let model = FlowModel::<f32>::randomized(FlowConfig::default(), 5, 0.05).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("scenario".into(), json!(scenario));
    meta.insert("val_nll".into(), json!(-2.5));
    let path = dir.join("model.nfck");
    save_checkpoint(&path, &Checkpoint::from_model(&model, meta)).unwrap();
    (path, model)
}

fn request(mask: &LayoutMask, scenario: &str, engine: &str) -> Value {
    let (r, c) = mask.source();
    json!({
        "layout": GridRle::from_mask(mask),
        "source": [r, c],
        "scenario": scenario,
        "engine": engine,
        "seed": 3,
    })
}

fn app_with_model(dir: &std::path::Path) -> Router {
    let (path, _) = stamped_model(dir, "baseline");
    router(AppState::new(Some(LoadedModel::load(&path).unwrap()), None))
}

#[tokio::test]
async fn health_reports_version() {
    let app = router(AppState::default());
    let r = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(r.status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.version, VERSION);
    assert_eq!(h.version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn health_is_fast() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let app = router(AppState::default());
    let stats = bench_runtime(|| rt.block_on(call(&app, "GET", "/v1/health", None)), 3, 21);
    assert!(stats.median_ms < 10.0, "{stats:?}");
}

#[tokio::test]
async fn model_card_404_then_matches_file() {
    let r = call(&router(AppState::default()), "GET", "/v1/model", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let dir = tempfile::tempdir().unwrap();
    let (path, model) = stamped_model(dir.path(), "baseline");
    let app = router(AppState::new(Some(LoadedModel::load(&path).unwrap()), None));
    let r = call(&app, "GET", "/v1/model", None).await;
    assert_eq!(r.status, StatusCode::OK);
    let card: ModelCard = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(card.checkpoint_sha256, sha256_hex(&std::fs::read(&path).unwrap()));
    assert_eq!(card.config.steps_per_scale, model.config().steps_per_scale);
    assert_eq!(card.config, *model.config());
    assert_eq!(card.scenario, Some(Scenario::Baseline));
    assert_eq!(card.training_nll, Some(-2.5));
}

#[tokio::test]
async fn empty_layout_is_radially_symmetric() {
    let app = router(AppState::default());
    let mask = LayoutMask::empty(64, (32, 32)).unwrap();
    let r = call(&app, "POST", "/v1/whatif", Some(request(&mask, "baseline", "simulator").to_string())).await;
    assert_eq!(r.status, StatusCode::OK);
    assert!(r.headers.contains_key(SIMULATOR_MS_HEADER));
    assert!(!r.headers.contains_key(MODEL_MS_HEADER));
    let resp: WhatIfResponse = serde_json::from_slice(&r.body).unwrap();
    assert!(resp.model.is_none() && resp.comparison.is_none());
    let map = decode_map(&resp.simulator.unwrap().map).unwrap();
    for a in 0..32i64 {
        for b in 0..32i64 {
            let at = |dr: i64, dc: i64| map.get((32 + dr) as usize, (32 + dc) as usize);
            let v = at(a, b);
            for w in [at(b, a), at(-a, b), at(a, -b), at(-b, -a)] {
                assert!((v - w).abs() < 1e-6, "({a},{b})");
            }
        }
    }
}

#[tokio::test]
async fn error_statuses() {
    let mask = LayoutMask::empty(32, (16, 16)).unwrap();
    let base = request(&mask, "baseline", "simulator");
    let app = router(AppState::default());

    let r = call(&app, "POST", "/v1/whatif", Some("{not json".into())).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let mut bad = base.clone();
    bad["layout"]["runs"] = json!([1000]);
    let r = call(&app, "POST", "/v1/whatif", Some(bad.to_string())).await;
    assert_eq!((r.status, r.json()["field"].clone()), (StatusCode::BAD_REQUEST, json!("layout")));

    let walled = {
        let mut cells = vec![0u8; 1024];
        cells[16 * 32 + 16] = 1;
        GridRle { width: 32, height: 32, runs: noiseflow_service::rle::encode(&cells) }
    };
    let mut bad = base.clone();
    bad["layout"] = serde_json::to_value(walled).unwrap();
    let r = call(&app, "POST", "/v1/whatif", Some(bad.to_string())).await;
    assert_eq!((r.status, r.json()["field"].clone()), (StatusCode::BAD_REQUEST, json!("source")));

    let mut bad = base.clone();
    bad["source"] = json!([40, 2]);
    let r = call(&app, "POST", "/v1/whatif", Some(bad.to_string())).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let mut bad = base.clone();
    bad["scenario"] = json!("underwater");
    let r = call(&app, "POST", "/v1/whatif", Some(bad.to_string())).await;
    assert_eq!((r.status, r.json()["field"].clone()), (StatusCode::UNPROCESSABLE_ENTITY, json!("scenario")));

    let r = call(&app, "POST", "/v1/whatif", Some(request(&mask, "baseline", "model").to_string())).await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    let dir = tempfile::tempdir().unwrap();
    let app = app_with_model(dir.path());
    let r = call(&app, "POST", "/v1/whatif", Some(request(&mask, "reflection", "both").to_string())).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let mut bad = request(&mask, "baseline", "model");
    bad["tau"] = json!(0.0);
    let r = call(&app, "POST", "/v1/whatif", Some(bad.to_string())).await;
    assert_eq!((r.status, r.json()["field"].clone()), (StatusCode::BAD_REQUEST, json!("tau")));
}

#[tokio::test]
async fn grid_size_flag_is_enforced() {
    let app = router(AppState::new(None, Some(64)));
    let mask = LayoutMask::empty(32, (16, 16)).unwrap();
    let r = call(&app, "POST", "/v1/whatif", Some(request(&mask, "baseline", "simulator").to_string())).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn identical_requests_give_identical_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with_model(dir.path());
    let mut cells = vec![0u8; 64 * 64];
    for r in 10..30 {
        cells[r * 64 + 40] = 1;
    }
    let mask = LayoutMask::new(64, cells, (20, 20)).unwrap();
    let body = request(&mask, "baseline", "both").to_string();
    let first = call(&app, "POST", "/v1/whatif", Some(body.clone())).await;
    assert_eq!(first.status, StatusCode::OK);
    let model_ms: f64 = first.headers[MODEL_MS_HEADER].to_str().unwrap().parse().unwrap();
    assert!(model_ms < 250.0, "{model_ms} ms");
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (app, body) = (app.clone(), body.clone());
            tokio::spawn(async move { call(&app, "POST", "/v1/whatif", Some(body)).await.body })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), first.body);
    }
    let resp: WhatIfResponse = serde_json::from_slice(&first.body).unwrap();
    let c = resp.comparison.unwrap();
    assert!(c.nlos_mae.is_some() && c.los_mae.is_some());
    assert_eq!(resp.regions.building, 20);
}

#[tokio::test]
async fn both_engines_agree_with_testset_evaluation() {
    let data = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        grid_size: 32,
        building_count: (3, 6),
        building_size: (3, 8),
        samples: 10,
        scenarios: vec![Scenario::Baseline],
        seed: 8,
        ..GenConfig::default()
    };
    let m = build_dataset(&cfg, data.path()).unwrap();
    let test = load_split(data.path(), &m, Split::Test, Scenario::Baseline).unwrap();
    let train = load_split(data.path(), &m, Split::Train, Scenario::Baseline).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = stamped_model(dir.path(), "baseline");
    let app = router(AppState::new(Some(LoadedModel::load(&path).unwrap()), None));

    let sample = &test[0];
    let opts = EvalOptions { seed: 3, tau: 0.7, resamples: 100, ..EvalOptions::default() };
    let report = evaluate_testset(&model, std::slice::from_ref(sample), &train, &cfg.scenario_config(Scenario::Baseline), &opts)
        .unwrap();
    let mut req = request(&sample.mask, "baseline", "both");
    req["tau"] = json!(0.7);
    let r = call(&app, "POST", "/v1/whatif", Some(req.to_string())).await;
    assert_eq!(r.status, StatusCode::OK);
    let resp: WhatIfResponse = serde_json::from_slice(&r.body).unwrap();
    let c = resp.comparison.unwrap();
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-9,
        (None, None) => true,
        _ => false,
    };
    let row = &report.model;
    assert!(close(c.los_mae, row.los_mae.map(|s| s.mean)));
    assert!(close(c.nlos_mae, row.nlos_mae.map(|s| s.mean)));
    assert!(close(c.los_wmape, row.los_wmape.map(|s| s.mean)));
    assert!(close(Some(c.ssim), row.ssim.map(|s| s.mean)));
    // The simulator pane equals the stored ground truth.
    let sim = decode_map(&resp.simulator.unwrap().map).unwrap();
    assert!(sim.values().iter().zip(sample.target.values()).all(|(a, b)| (a - b).abs() < 1e-7));
}
