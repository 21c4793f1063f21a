//! JSON-over-HTTP what-if service: simulate and/or predict one layout per
//! request. All endpoints live under `/v1`.
//!
//! Response bodies are deterministic for a fixed request; wall-clock timings
//! travel in the `x-simulator-ms` / `x-model-ms` headers instead.

pub mod rle;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use noiseflow::flow::{read_checkpoint, FlowConfig, FlowModel};
use noiseflow::metrics::{sample_metrics, WMAPE_THRESHOLD_DB};
use noiseflow::raster::{denormalize, normalize, write_raster, LayoutMask, NormMap};
use noiseflow::simulator::{build_region_masks, simulate, Scenario, ScenarioConfig};
use noiseflow::metrics::RegionLabel;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SIMULATOR_MS_HEADER: &str = "x-simulator-ms";
pub const MODEL_MS_HEADER: &str = "x-model-ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Simulator,
    Model,
    Both,
}

impl Engine {
    fn simulator(self) -> bool {
        self != Engine::Model
    }

    fn model(self) -> bool {
        self != Engine::Simulator
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRle {
    pub width: usize,
    pub height: usize,
    /// Alternating free/building run lengths, row-major, free first.
    pub runs: Vec<u32>,
}

impl GridRle {
    pub fn from_mask(mask: &LayoutMask) -> Self {
        Self { width: mask.size(), height: mask.size(), runs: rle::encode(mask.cells()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub layout: GridRle,
    /// `[row, col]`.
    pub source: [usize; 2],
    /// Kept as text so an unknown name maps to 422 rather than a parse error.
    pub scenario: String,
    pub engine: Engine,
    /// Sampling temperature; the model's configured value when absent.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reflection_order")]
    pub reflection_order: u32,
}

fn default_reflection_order() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineOutput {
    /// Base64 of a complete RasterFile holding the normalized map.
    pub map: String,
    /// Pixels clamped into [0, 1]; always 0 for the simulator.
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub los_mae: Option<f64>,
    pub nlos_mae: Option<f64>,
    pub los_wmape: Option<f64>,
    pub nlos_wmape: Option<f64>,
    pub ssim: f64,
    pub wmape_threshold_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSizes {
    pub building: usize,
    pub los: usize,
    pub nlos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub width: usize,
    pub height: usize,
    pub scenario: Scenario,
    pub tau: Option<f64>,
    pub seed: u64,
    pub simulator: Option<EngineOutput>,
    pub model: Option<EngineOutput>,
    /// Model against simulator, only for `engine = both`.
    pub comparison: Option<Comparison>,
    pub regions: RegionSizes,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub simulator_ms: Option<f64>,
    pub model_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub config: FlowConfig,
    pub checkpoint_sha256: String,
    pub parameters: usize,
    /// Scenario the model was trained on, if recorded.
    pub scenario: Option<Scenario>,
    pub training_nll: Option<f64>,
    pub eval_summary: Option<Value>,
    pub meta: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Checkpoint(#[from] noiseflow::flow::FlowError),
}

pub struct LoadedModel {
    pub model: FlowModel<f32>,
    pub card: ModelCard,
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        let ck = read_checkpoint(bytes)?;
        let model: FlowModel<f32> = ck.to_model()?;
        let scenario = ck.meta.get("scenario").and_then(Value::as_str).and_then(|s| s.parse().ok());
        let training_nll = ["val_nll", "best_val_nll"].iter().find_map(|k| ck.meta.get(*k).and_then(Value::as_f64));
        let card = ModelCard {
            config: model.config().clone(),
            checkpoint_sha256: sha256_hex(bytes),
            parameters: model.num_trainable(),
            scenario,
            training_nll,
            eval_summary: ck.meta.get("eval").cloned(),
            meta: ck.meta.clone(),
        };
        Ok(Self { model, card })
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let bytes = std::fs::read(path)
            .map_err(|e| LoadError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_bytes(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Immutable after startup; shared across requests.
#[derive(Clone, Default)]
pub struct AppState {
    model: Option<Arc<LoadedModel>>,
    grid_size: Option<usize>,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, grid_size: Option<usize>) -> Self {
        Self { model: model.map(Arc::new), grid_size }
    }

    pub fn model(&self) -> Option<&LoadedModel> {
        self.model.as_deref()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    /// Request field at fault, when there is one.
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<&str>, error: impl Into<String>) -> Self {
        Self { status: status.as_u16(), error: error.into(), field: field.map(String::from) }
    }

    fn bad(field: &str, error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, Some(field), error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json_response(status, &self)
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let bytes = serde_json::to_vec(body).expect("serializable body");
    let mut resp = (status, bytes).into_response();
    resp.headers_mut().insert("content-type", HeaderValue::from_static("application/json"));
    resp
}

fn encode_map(map: &NormMap) -> String {
    base64::engine::general_purpose::STANDARD.encode(write_raster(&map.to_raster()))
}

/// Decode a base64 map produced by this service.
pub fn decode_map(text: &str) -> Result<NormMap, String> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(text).map_err(|e| e.to_string())?;
    let raster = noiseflow::raster::read_raster(&bytes).map_err(|e| e.to_string())?;
    NormMap::from_values(
        raster.width as usize,
        raster.height as usize,
        raster.data.iter().map(|&v| v as f64).collect(),
    )
    .map_err(|e| e.to_string())
}

fn parse_mask(req: &WhatIfRequest, grid_size: Option<usize>) -> Result<LayoutMask, ApiError> {
    let GridRle { width, height, .. } = req.layout;
    if width == 0 || width != height {
        return Err(ApiError::bad("layout", format!("grid must be square and non-empty, got {width}x{height}")));
    }
    if let Some(n) = grid_size {
        if width != n {
            return Err(ApiError::bad("layout", format!("this server expects {n}x{n} grids, got {width}x{height}")));
        }
    }
    let cells = rle::decode(&req.layout.runs, width * height).map_err(|e| ApiError::bad("layout", e.to_string()))?;
    let [r, c] = req.source;
    if r >= height || c >= width {
        return Err(ApiError::bad("source", format!("source ({r}, {c}) outside {width}x{height} grid")));
    }
    if cells[r * width + c] != 0 {
        return Err(ApiError::bad("source", format!("source ({r}, {c}) is inside a building")));
    }
    LayoutMask::new(width, cells, (r, c)).map_err(|e| ApiError::bad("layout", e.to_string()))
}

/// The request computation behind `POST /v1/whatif`, without HTTP.
pub fn run_whatif(state: &AppState, req: &WhatIfRequest) -> Result<(WhatIfResponse, Timings), ApiError> {
    let scenario: Scenario = req
        .scenario
        .parse()
        .map_err(|e: noiseflow::simulator::SimError| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, Some("scenario"), e.to_string()))?;
    let loaded = if req.engine.model() {
        let m = state.model().ok_or_else(|| {
            ApiError::new(StatusCode::CONFLICT, Some("engine"), "no model loaded; start the server with --checkpoint")
        })?;
        if let Some(trained) = m.card.scenario {
            if trained != scenario {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    Some("scenario"),
                    format!("the loaded model was trained on {trained}, not {scenario}"),
                ));
            }
        }
        Some(m)
    } else {
        None
    };
    let mask = parse_mask(req, state.grid_size)?;
    let sim_cfg = ScenarioConfig { reflection_order: req.reflection_order, ..ScenarioConfig::for_scenario(scenario) };
    sim_cfg.validate().map_err(|e| ApiError::bad("reflection_order", e.to_string()))?;
    let tau = loaded.map(|m| req.tau.unwrap_or(m.card.config.temperature));
    if let Some(t) = tau {
        if !(t.is_finite() && t > 0.0) {
            return Err(ApiError::bad("tau", format!("temperature must be positive, got {t}")));
        }
    }

    let mut timings = Timings::default();
    let sim = if req.engine.simulator() {
        let t = Instant::now();
        let db = simulate(&mask, &sim_cfg).map_err(|e| ApiError::bad("scenario", e.to_string()))?;
        timings.simulator_ms = Some(t.elapsed().as_secs_f64() * 1e3);
        let norm = normalize(&db).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))?;
        Some((db, norm))
    } else {
        None
    };
    let pred = match (loaded, tau) {
        (Some(m), Some(t)) => {
            m.model.config().check_size(mask.size()).map_err(|e| ApiError::bad("layout", e.to_string()))?;
            let start = Instant::now();
            let (norm, clamped) = m
                .model
                .sample(&mask, t, req.seed)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))?;
            timings.model_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            Some((norm, clamped))
        }
        _ => None,
    };

    let regions = build_region_masks(&mask);
    let comparison = match (&sim, &pred) {
        (Some((sim_db, sim_norm)), Some((norm, _))) => {
            let (pred_db, _) = denormalize(norm);
            let m = sample_metrics(sim_db, sim_norm, &pred_db, norm, &regions, WMAPE_THRESHOLD_DB)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))?;
            Some(Comparison {
                los_mae: m.los_mae,
                nlos_mae: m.nlos_mae,
                los_wmape: m.los_wmape,
                nlos_wmape: m.nlos_wmape,
                ssim: m.ssim,
                wmape_threshold_db: WMAPE_THRESHOLD_DB,
            })
        }
        _ => None,
    };
    let resp = WhatIfResponse {
        width: mask.size(),
        height: mask.size(),
        scenario,
        tau,
        seed: req.seed,
        simulator: sim.as_ref().map(|(_, n)| EngineOutput { map: encode_map(n), clamped: 0 }),
        model: pred.as_ref().map(|(n, c)| EngineOutput { map: encode_map(n), clamped: *c }),
        comparison,
        regions: RegionSizes {
            building: regions.count(RegionLabel::Building),
            los: regions.count(RegionLabel::Los),
            nlos: regions.count(RegionLabel::Nlos),
        },
    };
    Ok((resp, timings))
}

async fn whatif(State(state): State<AppState>, body: Bytes) -> Response {
    let req: WhatIfRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::new(StatusCode::BAD_REQUEST, None, format!("malformed request: {e}")).into_response(),
    };
    let result = tokio::task::spawn_blocking(move || run_whatif(&state, &req)).await;
    match result {
        Ok(Ok((resp, timings))) => {
            let mut r = json_response(StatusCode::OK, &resp);
            let h: &mut HeaderMap = r.headers_mut();
            for (name, v) in [(SIMULATOR_MS_HEADER, timings.simulator_ms), (MODEL_MS_HEADER, timings.model_ms)] {
                if let Some(ms) = v {
                    h.insert(name, HeaderValue::from_str(&format!("{ms:.3}")).expect("ascii"));
                }
            }
            r
        }
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()).into_response(),
    }
}

async fn model_card(State(state): State<AppState>) -> Response {
    match state.model() {
        Some(m) => json_response(StatusCode::OK, &m.card),
        None => ApiError::new(StatusCode::NOT_FOUND, None, "no model loaded").into_response(),
    }
}

async fn health() -> Response {
    json_response(StatusCode::OK, &Health { status: "ok".into(), version: VERSION.into() })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/whatif", post(whatif))
        .route("/v1/model", get(model_card))
        .route("/v1/health", get(health))
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
