//! HTTP/JSON service over the DocXplain pipeline.
//!
//! | route            | body                | reply              |
//! |------------------|---------------------|--------------------|
//! | `GET /healthz`   |                     | `ok`               |
//! | `POST /v1/segment`  | [`SegmentRequest`]  | [`SegmentResponse`]  |
//! | `POST /v1/explain`  | [`ExplainRequest`]  | [`ExplainResponse`]  |
//! | `POST /v1/evaluate` | [`EvaluateRequest`] | [`EvaluateResponse`] |
//!
//! Failures reply with an [`ErrorResponse`]: 400 for bad requests, 502 when
//! the model misbehaves, 500 otherwise. Models are instantiated on first use
//! and kept per spec, so subprocess models and their score caches outlive a
//! single request.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use docxplain_core::api::{
    ErrorBody, ErrorKind, ErrorResponse, EvaluateRequest, EvaluateResponse, ExplainRequest,
    ExplainResponse, MapPayload, MaskPayload, SampleMapPayload, SegmentRequest, SegmentResponse,
};
use docxplain_core::config::RunConfig;
use docxplain_core::corpus::{run_corpus, CorpusSample, CorpusSettings};
use docxplain_core::formats::{encode_map, encode_mask};
use docxplain_core::imaging::RasterImage;
use docxplain_core::model::{ClassifierHandle, ModelError, ModelSpec};
use docxplain_core::pipeline::{explain, MethodSpec, PipelineError};
use docxplain_core::render::{heatmap_png, mask_png};
use docxplain_core::segmentation::build_masks;

/// Largest accepted request body.
pub const BODY_LIMIT: usize = 1 << 30;

/// Model input size assumed by `segment` when the config names no model.
pub const DEFAULT_MODEL_SIZE: (usize, usize) = (224, 224);

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        let status = match kind {
            ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
            ErrorKind::ModelProtocol | ErrorKind::Model => StatusCode::BAD_GATEWAY,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ErrorBody {
                kind,
                message: message.into(),
                offset: None,
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::BadRequest, message)
    }

    fn is_protocol(&self) -> bool {
        self.body.kind == ErrorKind::ModelProtocol
    }
}

impl From<ModelError> for ApiError {
    fn from(err: ModelError) -> Self {
        match &err {
            ModelError::Protocol(p) => {
                let mut e = Self::new(ErrorKind::ModelProtocol, err.to_string());
                e.body.offset = Some(p.offset);
                e
            }
            ModelError::Backend(_) => Self::new(ErrorKind::Model, err.to_string()),
            _ => Self::bad_request(err.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(err: PipelineError) -> Self {
        match err {
            PipelineError::Model(m) => m.into(),
            PipelineError::Imaging(_) | PipelineError::Invalid(_) => Self::bad_request(err.to_string()),
            other => match other.model_error() {
                Some(ModelError::Protocol(p)) => {
                    let mut e = Self::new(ErrorKind::ModelProtocol, other.to_string());
                    e.body.offset = Some(p.offset);
                    e
                }
                Some(ModelError::Backend(_)) => Self::new(ErrorKind::Model, other.to_string()),
                _ => Self::new(ErrorKind::Internal, other.to_string()),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorResponse { error: self.body })).into_response()
    }
}

/// Instantiated models keyed by spec id.
#[derive(Default)]
pub struct AppState {
    models: Mutex<HashMap<String, Arc<ClassifierHandle>>>,
}

impl AppState {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn model(&self, spec: &ModelSpec) -> Result<Arc<ClassifierHandle>, ApiError> {
        let id = spec.id();
        let mut models = self.models.lock().expect("model registry lock");
        if let Some(m) = models.get(&id) {
            return Ok(m.clone());
        }
        let handle = spec.instantiate()?;
        models.insert(id, handle.clone());
        Ok(handle)
    }

    /// Drops a model whose process violated the protocol; its stream
    /// position is unknown, so the next request starts a fresh process.
    fn evict(&self, spec: &ModelSpec) {
        self.models.lock().expect("model registry lock").remove(&spec.id());
        tracing::warn!(model = %spec.id(), "evicted model after protocol error");
    }

    fn loaded(&self) -> usize {
        self.models.lock().expect("model registry lock").len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/segment", post(segment))
        .route("/v1/explain", post(explain_route))
        .route("/v1/evaluate", post(evaluate))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until the listener fails or the process receives Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz(State(state): State<Arc<AppState>>) -> String {
    format!("ok models={}\n", state.loaded())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorKind::Internal, format!("worker failed: {e}")))?
}

fn model_size(spec: &ModelSpec) -> (usize, usize) {
    match spec {
        ModelSpec::Synthetic { width, height, .. } | ModelSpec::Subprocess { width, height, .. } => {
            (*width, *height)
        }
    }
}

fn validated(config: &RunConfig) -> Result<(), ApiError> {
    config.validate().map_err(|e| ApiError::bad_request(e.to_string()))
}

fn require_model(config: &RunConfig) -> Result<&ModelSpec, ApiError> {
    config
        .model
        .as_ref()
        .ok_or_else(|| ApiError::bad_request("config names no model"))
}

fn decode(bytes: &[u8]) -> Result<RasterImage, ApiError> {
    RasterImage::decode(bytes).map_err(|e| ApiError::bad_request(format!("image: {e}")))
}

/// Explicit methods, or the DocXplain variants selected by `config.mode`.
fn resolve_methods(explicit: Option<Vec<MethodSpec>>, config: &RunConfig) -> Result<Vec<MethodSpec>, ApiError> {
    let methods = match explicit {
        Some(m) => m,
        None => config
            .mode_methods()
            .map_err(|e| ApiError::bad_request(e.to_string()))?,
    };
    if methods.is_empty() {
        return Err(ApiError::bad_request("no methods requested"));
    }
    let mut seen = HashSet::new();
    for m in &methods {
        if !seen.insert(m.label()) {
            return Err(ApiError::bad_request(format!("method {} requested twice", m.label())));
        }
    }
    Ok(methods)
}

async fn segment(Json(req): Json<SegmentRequest>) -> Result<Json<SegmentResponse>, ApiError> {
    validated(&req.config)?;
    blocking(move || {
        let page = decode(&req.image)?;
        let size = req.config.model.as_ref().map(model_size).unwrap_or(DEFAULT_MODEL_SIZE);
        let seg = &req.config.explain.segmentation;
        let masks = build_masks(&page, seg, size)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let masks: Vec<MaskPayload> = seg
            .kernels
            .iter()
            .zip(&masks)
            .map(|(k, m)| MaskPayload {
                kernel: format!("{}x{}", k.fg_kernel.kx(), k.fg_kernel.ky()),
                width: m.width(),
                height: m.height(),
                n_bg: m.n_bg(),
                n_fg: m.n_fg(),
                dxsm: encode_mask(m),
                png: mask_png(m),
            })
            .collect();
        Ok(SegmentResponse {
            empty_foreground: masks.iter().all(|m| m.n_fg == 0),
            masks,
        })
    })
    .await
    .map(Json)
}

async fn explain_route(
    State(state): State<Arc<AppState>>,
    Json(req): Json<ExplainRequest>,
) -> Result<Json<ExplainResponse>, ApiError> {
    validated(&req.config)?;
    let spec = require_model(&req.config)?.clone();
    let methods = resolve_methods(req.methods, &req.config)?;
    let st = state.clone();
    let evicted = spec.clone();
    let result = blocking(move || {
        let model = st.model(&spec)?;
        let page = decode(&req.image)?;
        let cfg = &req.config;
        let ex = explain(&model, &page, &methods, cfg.target_class, &cfg.explain, cfg.seed)?;
        let scores = model.score(&ex.input)?.0;
        let maps = ex
            .maps
            .iter()
            .map(|(m, map)| {
                Ok(MapPayload {
                    method: m.label(),
                    width: map.width,
                    height: map.height,
                    target_class: map.target_class,
                    dxam: encode_map(map),
                    heatmap_png: heatmap_png(map, &ex.input)
                        .map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))?,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(ExplainResponse {
            target_class: ex.target,
            scores,
            maps,
        })
    })
    .await;
    if matches!(&result, Err(e) if e.is_protocol()) {
        state.evict(&evicted);
    }
    result.map(Json)
}

async fn evaluate(
    State(state): State<Arc<AppState>>,
    Json(req): Json<EvaluateRequest>,
) -> Result<Json<EvaluateResponse>, ApiError> {
    validated(&req.config)?;
    if req.samples.is_empty() {
        return Err(ApiError::bad_request("corpus is empty"));
    }
    let spec = require_model(&req.config)?.clone();
    let methods = resolve_methods(req.methods, &req.config)?;
    let st = state.clone();
    let evicted = spec.clone();
    let result = blocking(move || {
        let model = st.model(&spec)?;
        let samples: Vec<CorpusSample> = req
            .samples
            .into_iter()
            .map(|s| CorpusSample {
                name: s.name,
                bytes: s.image,
                true_class: s.true_class,
            })
            .collect();
        let settings = CorpusSettings {
            methods,
            explain: req.config.explain.clone(),
            metrics: req.config.metrics,
            seed: req.config.seed,
            target: req.config.target_class,
            workers: req.workers,
        };
        let (report, maps) = run_corpus(&model, &samples, &settings);
        tracing::info!(
            evaluated = report.n_evaluated,
            misclassified = report.n_misclassified,
            failed = report.n_failed,
            "corpus run finished"
        );
        let maps = maps
            .into_iter()
            .enumerate()
            .flat_map(|(i, m)| {
                m.into_iter().flatten().map(move |(method, map)| SampleMapPayload {
                    sample: i,
                    method,
                    dxam: encode_map(&map),
                })
            })
            .collect();
        Ok(EvaluateResponse { report, maps })
    })
    .await;
    match &result {
        Err(e) if e.is_protocol() => state.evict(&evicted),
        Ok(r) if r.report.has_protocol_failure() => state.evict(&evicted),
        _ => {}
    }
    result.map(Json)
}
