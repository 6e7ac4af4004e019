//! HTTP inference service.
//!
//! Checkpoints are loaded once at startup. Uploaded images stay in memory
//! for the duration of a request and are never written anywhere.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dermoscan_core::augment::AugmentationPolicy;
use dermoscan_core::metrics::ThresholdSweepResult;
use dermoscan_core::{MalignancyClass, Taxonomy, LABEL_ORDER, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::checkpoint::{load_checkpoint, CheckpointMeta, META_FILE};
use crate::error::{read_error, write_error, Error, Result};
use crate::evaluate::{predict, predict_tta};
use crate::imageio;
use crate::zoo::{ArchitectureId, Network};

pub const DISCLAIMER: &str = "Decision support only; not a medical diagnosis.";
pub const PORT_ENV: &str = "DERMOSCAN_PORT";
pub const CHECKPOINT_DIR_ENV: &str = "DERMOSCAN_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub checkpoint_paths: Vec<PathBuf>,
    /// Model used when a request names none; the first checkpoint if unset.
    pub default_model: Option<String>,
    pub default_threshold: f64,
    pub host: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    /// Views used when a request omits `tta`; 0 is the plain prediction.
    pub tta_default: usize,
    pub max_tta: usize,
    /// Append-only JSON-lines log of request metadata (never pixels).
    pub audit_log: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint_paths: Vec::new(),
            default_model: None,
            default_threshold: 0.5,
            host: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: 10 * 1024 * 1024,
            tta_default: 0,
            max_tta: 32,
            audit_log: None,
        }
    }
}

/// Checkpoint directories under `dir`: `dir` itself if it holds a
/// checkpoint, otherwise its immediate subdirectories that do.
pub fn discover_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(META_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(read_error(dir))? {
        let path = entry.map_err(read_error(dir))?.path();
        if path.join(META_FILE).is_file() {
            found.push(path);
        }
    }
    found.sort();
    if found.is_empty() {
        found.push(dir.to_path_buf());
    }
    Ok(found)
}

impl ServiceConfig {
    /// Defaults, then environment variables, then the JSON file if given.
    pub fn resolve(file: Option<&Path>) -> Result<Self> {
        let mut config = Self::default();
        if let Ok(port) = std::env::var(PORT_ENV) {
            config.port = port
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{PORT_ENV}={port} is not a port number")))?;
        }
        if let Some(dir) = std::env::var_os(CHECKPOINT_DIR_ENV) {
            config.checkpoint_paths = discover_checkpoints(Path::new(&dir))?;
        }
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(read_error(path))?;
            let mut value = serde_json::to_value(&config)?;
            let overrides: serde_json::Value = serde_json::from_str(&text)?;
            if let (Some(base), serde_json::Value::Object(o)) = (value.as_object_mut(), overrides) {
                base.extend(o);
            }
            config = serde_json::from_value(value)?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_paths.is_empty() {
            return Err(Error::InvalidConfig("no checkpoints configured".into()));
        }
        if !(0.0..=1.0).contains(&self.default_threshold) {
            return Err(Error::InvalidConfig(format!("default_threshold {} outside [0, 1]", self.default_threshold)));
        }
        if self.max_upload_bytes == 0 {
            return Err(Error::InvalidConfig("max_upload_bytes must be positive".into()));
        }
        Ok(())
    }
}

struct LoadedModel {
    meta: CheckpointMeta,
    policy: AugmentationPolicy,
    network: Mutex<Network>,
    sweep: Option<ThresholdSweepResult>,
}

pub struct AppState {
    config: ServiceConfig,
    default_model: String,
    models: BTreeMap<String, LoadedModel>,
    audit: Option<Mutex<File>>,
}

impl AppState {
    /// Load every configured checkpoint.
    pub fn load(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let mut models = BTreeMap::new();
        let mut first = None;
        for path in &config.checkpoint_paths {
            let ckpt = load_checkpoint(path)?;
            let id = ckpt.meta.model_id.clone();
            if models.contains_key(&id) {
                return Err(Error::InvalidConfig(format!("two checkpoints share model id `{id}`")));
            }
            if ckpt.meta.num_classes != NUM_CLASSES {
                return Err(Error::CheckpointCorrupt {
                    path: path.clone(),
                    reason: format!("{} classes, the service needs {NUM_CLASSES}", ckpt.meta.num_classes),
                });
            }
            log::info!("loaded model `{id}` ({}) from {}", ckpt.meta.arch, path.display());
            first.get_or_insert_with(|| id.clone());
            models.insert(
                id,
                LoadedModel {
                    policy: ckpt.meta.effective_policy(),
                    meta: ckpt.meta,
                    network: Mutex::new(ckpt.network),
                    sweep: ckpt.sweep,
                },
            );
        }
        let default_model = match &config.default_model {
            Some(m) if models.contains_key(m) => m.clone(),
            Some(m) => return Err(Error::InvalidConfig(format!("default_model `{m}` is not among the loaded checkpoints"))),
            None => first.expect("at least one checkpoint"),
        };
        let audit = match &config.audit_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(path).map_err(write_error(path))?,
            )),
            None => None,
        };
        Ok(Self {
            config,
            default_model,
            models,
            audit,
        })
    }

    fn model(&self, id: Option<&str>) -> std::result::Result<(&str, &LoadedModel), ApiError> {
        let id = id.unwrap_or(&self.default_model);
        self.models
            .get_key_value(id)
            .map(|(k, v)| (k.as_str(), v))
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown model `{id}`")))
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub arch: ArchitectureId,
    pub tta_default: usize,
    pub default_threshold: f64,
    pub has_operating_curve: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model_id: String,
    /// Keyed by label code; the map iterates in label order.
    pub probabilities: BTreeMap<String, f64>,
    pub malignant_probability: f64,
    pub threshold: f64,
    pub decision: MalignancyClass,
    pub tta_n: usize,
    /// Seed of the augmented views, echoed so a request can be replayed.
    pub seed: u64,
    pub disclaimer: String,
}

impl PredictResponse {
    fn new(model_id: &str, probs: &[f64; NUM_CLASSES], taxonomy: &Taxonomy, threshold: f64, tta_n: usize, seed: u64) -> Self {
        let malignant_probability = taxonomy.malignant_probability(probs);
        Self {
            model_id: model_id.to_string(),
            probabilities: LABEL_ORDER.iter().map(|l| (l.code().to_string(), probs[l.index()])).collect(),
            malignant_probability,
            threshold,
            decision: if malignant_probability >= threshold {
                MalignancyClass::Malignant
            } else {
                MalignancyClass::Benign
            },
            tta_n,
            seed,
            disclaimer: DISCLAIMER.to_string(),
        }
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn models(State(state): State<Arc<AppState>>) -> Json<Vec<ModelInfo>> {
    Json(
        state
            .models
            .iter()
            .map(|(id, m)| ModelInfo {
                model_id: id.clone(),
                arch: m.meta.arch,
                tta_default: state.config.tta_default,
                default_threshold: state.config.default_threshold,
                has_operating_curve: m.sweep.is_some(),
            })
            .collect(),
    )
}

async fn operating_curve(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<ThresholdSweepResult> {
    let (id, model) = state.model(q.get("model").map(String::as_str))?;
    model
        .sweep
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("model `{id}` has no operating curve")))
}

fn parse_param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> std::result::Result<Option<T>, ApiError> {
    q.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError(StatusCode::BAD_REQUEST, format!("invalid `{key}` value `{v}`")))
        })
        .transpose()
}

/// Random seeds stay below 2^53 so they survive a JSON number roundtrip in
/// any client.
fn fresh_seed() -> u64 {
    rand::random::<u64>() >> 11
}

struct PredictRequest {
    model: String,
    tta: usize,
    threshold: f64,
    seed: u64,
}

fn read_params(state: &AppState, q: &HashMap<String, String>) -> std::result::Result<PredictRequest, ApiError> {
    let (model, _) = state.model(q.get("model").map(String::as_str))?;
    let tta = parse_param::<usize>(q, "tta")?.unwrap_or(state.config.tta_default);
    if tta > state.config.max_tta {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("tta {tta} exceeds the limit {}", state.config.max_tta)));
    }
    let threshold = parse_param::<f64>(q, "threshold")?.unwrap_or(state.config.default_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("threshold {threshold} outside [0, 1]")));
    }
    let seed = parse_param::<u64>(q, "seed")?.unwrap_or_else(fresh_seed);
    Ok(PredictRequest {
        model: model.to_string(),
        tta,
        threshold,
        seed,
    })
}

async fn read_upload(mut multipart: Multipart, limit: usize) -> std::result::Result<Vec<u8>, ApiError> {
    let multipart_error = |e: axum::extract::multipart::MultipartError| ApiError(e.status(), e.body_text());
    let mut first_file = None;
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        let is_image = field.name() == Some("image");
        let is_file = field.file_name().is_some();
        if is_image || (is_file && first_file.is_none()) {
            let bytes = field.bytes().await.map_err(multipart_error)?;
            if bytes.len() > limit {
                return Err(too_large(limit));
            }
            if is_image {
                return Ok(bytes.to_vec());
            }
            first_file = Some(bytes.to_vec());
        }
    }
    first_file.ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "multipart body has no `image` field".into()))
}

fn too_large(limit: usize) -> ApiError {
    ApiError(StatusCode::PAYLOAD_TOO_LARGE, format!("upload exceeds {limit} bytes"))
}

fn run_prediction(state: &AppState, req: &PredictRequest, bytes: &[u8]) -> std::result::Result<PredictResponse, ApiError> {
    let (id, model) = state.model(Some(&req.model))?;
    let image = imageio::decode_staged(bytes, model.policy.presize_to)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let internal = |e: Error| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let net = model.network.lock().unwrap_or_else(|p| p.into_inner());
    let probs = if req.tta == 0 {
        predict(&net, &[(String::new(), image)], &model.policy, id).map_err(internal)?.entries[""]
    } else {
        predict_tta(&net, &image, &model.policy, req.tta, req.seed).map_err(internal)?
    };
    Ok(PredictResponse::new(id, &probs, &model.meta.taxonomy, req.threshold, req.tta, req.seed))
}

fn audit(state: &AppState, req: Option<&PredictRequest>, bytes: usize, outcome: std::result::Result<&PredictResponse, &ApiError>) {
    let Some(log) = &state.audit else { return };
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let entry = serde_json::json!({
        "time": now,
        "model_id": req.map(|r| r.model.as_str()),
        "tta_n": req.map(|r| r.tta),
        "threshold": req.map(|r| r.threshold),
        "seed": req.map(|r| r.seed),
        "upload_bytes": bytes,
        "status": outcome.as_ref().map(|_| 200).unwrap_or_else(|e| e.0.as_u16()),
        "decision": outcome.ok().map(|r| r.decision),
    });
    let mut f = log.lock().unwrap_or_else(|p| p.into_inner());
    if let Err(e) = writeln!(f, "{entry}") {
        log::warn!("audit log write failed: {e}");
    }
}

async fn predict_handler(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
    multipart: Multipart,
) -> ApiResult<PredictResponse> {
    let req = match read_params(&state, &q) {
        Ok(r) => r,
        Err(e) => {
            audit(&state, None, 0, Err(&e));
            return Err(e);
        }
    };
    let bytes = match read_upload(multipart, state.config.max_upload_bytes).await {
        Ok(b) => b,
        Err(e) => {
            audit(&state, Some(&req), 0, Err(&e));
            return Err(e);
        }
    };
    let worker = state.clone();
    let (req, len, result) = tokio::task::spawn_blocking(move || {
        let result = run_prediction(&worker, &req, &bytes);
        (req, bytes.len(), result)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    audit(&state, Some(&req), len, result.as_ref());
    result.map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    // Room for multipart framing around a maximal image.
    let body_limit = state.config.max_upload_bytes + 64 * 1024;
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/operating-curve", get(operating_curve))
        .route("/predict", post(predict_handler))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

pub struct ServiceHandle {
    pub local_addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl ServiceHandle {
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.map_err(std::io::Error::other)?
    }

    /// Serve until the process receives Ctrl-C.
    pub async fn run_until_ctrl_c(self) -> std::io::Result<()> {
        let _ = tokio::signal::ctrl_c().await;
        self.shutdown().await
    }
}

/// Load the checkpoints, bind the port and start serving in the background.
pub async fn start(config: ServiceConfig) -> Result<ServiceHandle> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::load(config)).await.map_err(|e| {
        Error::InvalidConfig(format!("checkpoint loading panicked: {e}"))
    })??);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| Error::PortUnavailable { addr: addr.clone(), source })?;
    let local_addr = listener.local_addr().map_err(|source| Error::PortUnavailable { addr, source })?;
    let (tx, rx) = oneshot::channel();
    let app = router(state);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    log::info!("listening on http://{local_addr}");
    Ok(ServiceHandle {
        local_addr,
        shutdown: Some(tx),
        task,
    })
}
