//! HTTP/JSON inference service.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, Semaphore};
use visconet::control::{default_presets, ScaleGroup, SCALE_MAX};
use visconet::diffusion::NUM_TAPS;
use visconet::model::Model;
use visconet::scenegen::{Category, Dataset};
use visconet::trainer::{Checkpoint, Header};

use crate::request::{encode_png, generate, mask_to_image, FieldError, GenerateRequest, RequestError};

pub const PORT_ENV: &str = "VISCONET_PORT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    /// Requests allowed to wait behind the one in flight.
    pub queue_depth: usize,
    pub checkpoint: PathBuf,
    /// Dataset for sample ids and `/v1/samples`.
    pub dataset: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), queue_depth: 4, checkpoint: PathBuf::from("checkpoint.bin"), dataset: None }
    }
}

impl ServeConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The bind address with the port replaced by `port` when given.
    pub fn address(&self, port: Option<&str>) -> anyhow::Result<SocketAddr> {
        let mut addr: SocketAddr = self.bind.parse().with_context(|| format!("bad bind address {}", self.bind))?;
        if let Some(p) = port {
            addr.set_port(p.parse().with_context(|| format!("bad {PORT_ENV} value {p}"))?);
        }
        Ok(addr)
    }
}

/// Loaded, immutable service state.
pub struct Service {
    pub model: Model,
    pub header: Header,
    pub checkpoint: PathBuf,
    pub dataset: Option<Dataset>,
    pub queue_depth: usize,
    slots: Semaphore,
    turn: Mutex<()>,
    next_id: AtomicU64,
}

impl Service {
    pub fn load(cfg: &ServeConfig) -> anyhow::Result<Self> {
        let ck = Checkpoint::load(&cfg.checkpoint)?;
        let model = ck.model()?;
        let dataset = cfg.dataset.as_deref().map(Dataset::load).transpose()?;
        Ok(Self::new(model, ck.header, cfg.checkpoint.clone(), dataset, cfg.queue_depth))
    }

    pub fn new(model: Model, header: Header, checkpoint: PathBuf, dataset: Option<Dataset>, queue_depth: usize) -> Self {
        Self {
            model,
            header,
            checkpoint,
            dataset,
            queue_depth,
            slots: Semaphore::new(queue_depth + 1),
            turn: Mutex::new(()),
            next_id: AtomicU64::new(1),
        }
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/presets", get(presets))
        .route("/v1/meta", get(meta))
        .route("/v1/samples", get(list_samples))
        .route("/v1/samples/{id}", get(sample))
        .route("/v1/generate", post(generate_handler))
        .with_state(service)
}

pub async fn serve(cfg: ServeConfig) -> anyhow::Result<()> {
    let port = std::env::var(PORT_ENV).ok();
    let addr = cfg.address(port.as_deref())?;
    let service = Arc::new(tokio::task::spawn_blocking(move || Service::load(&cfg)).await??);
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await?;
    Ok(())
}

fn error(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

fn invalid(fields: Vec<FieldError>) -> Response {
    error(StatusCode::BAD_REQUEST, json!({ "error": "invalid_request", "fields": fields }))
}

impl IntoResponse for RequestError {
    fn into_response(self) -> Response {
        match self {
            RequestError::Invalid { fields } => invalid(fields),
            RequestError::OutOfVocabulary(words) => error(
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "out_of_vocabulary", "words": words, "message": format!("unknown words: {}", words.join(", ")) }),
            ),
            RequestError::Runtime(e) => {
                error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal", "message": e.to_string() }))
            }
        }
    }
}

async fn health(State(s): State<Arc<Service>>) -> Json<Value> {
    Json(json!({ "status": "ok", "checkpoint": s.checkpoint.display().to_string() }))
}

async fn presets() -> Json<Value> {
    let groups: BTreeMap<&str, Vec<usize>> = ScaleGroup::ALL.iter().map(|g| (g.name(), g.taps().collect())).collect();
    let presets: BTreeMap<String, Vec<f32>> = default_presets().into_iter().map(|(k, v)| (k, v.values().to_vec())).collect();
    Json(json!({ "presets": presets, "groups": groups, "taps": NUM_TAPS, "scale_max": SCALE_MAX }))
}

async fn meta(State(s): State<Arc<Service>>) -> Json<Value> {
    let h = &s.header;
    Json(json!({
        "checkpoint": s.checkpoint.display().to_string(),
        "version": h.version,
        "step": h.step,
        "conditioning": h.conditioning,
        "unet": h.unet,
        "schedule": h.schedule,
        "checksums": h.checksums,
        "vocab": h.vocab,
        "image_size": visconet::scenegen::IMAGE_SIZE,
        "style_size": visconet::scenegen::STYLE_SIZE,
        "categories": Category::ALL.iter().map(|c| c.name()).collect::<Vec<_>>(),
        "taps": NUM_TAPS,
        "queue_depth": s.queue_depth,
        "dataset": s.dataset.as_ref().map(|d| json!({ "path": d.dir.display().to_string(), "count": d.len() })),
    }))
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "page_limit")]
    limit: usize,
}

fn page_limit() -> usize {
    50
}

fn no_dataset() -> Response {
    error(StatusCode::NOT_FOUND, json!({ "error": "not_found", "message": "no dataset is configured" }))
}

async fn list_samples(State(s): State<Arc<Service>>, Query(p): Query<Page>) -> Response {
    let Some(ds) = &s.dataset else { return no_dataset() };
    let end = ds.len().min(p.offset.saturating_add(p.limit.min(500)));
    let items: Vec<Value> = (p.offset.min(end)..end)
        .map(|i| {
            let e = &ds.manifest.samples[i];
            json!({ "id": i, "split": e.split })
        })
        .collect();
    Json(json!({ "count": ds.len(), "offset": p.offset, "samples": items })).into_response()
}

async fn sample(State(s): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(ds) = &s.dataset else { return no_dataset() };
    let Some(id) = id.parse::<usize>().ok().filter(|&i| i < ds.len()) else {
        return error(StatusCode::NOT_FOUND, json!({ "error": "not_found", "message": format!("no sample {id}") }));
    };
    let smp = match ds.get(id) {
        Ok(x) => x,
        Err(e) => return RequestError::Runtime(e).into_response(),
    };
    let styles: BTreeMap<&str, String> = Category::ALL
        .iter()
        .map(|&c| (c.name(), if smp.style_set.present[c.index()] { encode_png(smp.style_set.get(c)) } else { String::new() }))
        .collect();
    Json(json!({
        "id": id,
        "split": ds.manifest.samples[id].split,
        "text_label": smp.text_label,
        "image": encode_png(&smp.image),
        "pose_map": encode_png(&smp.pose_map),
        "mask": encode_png(&mask_to_image(&smp.human_mask, smp.image.width)),
        "style_images": styles,
        "palette": smp.palette_meta,
    }))
    .into_response()
}

async fn generate_handler(State(s): State<Arc<Service>>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return invalid(vec![FieldError { field: "body".into(), message: e.to_string() }]),
    };
    let Ok(permit) = s.slots.try_acquire() else {
        return error(
            StatusCode::CONFLICT,
            json!({ "error": "busy", "message": format!("a generation is running and {} requests are queued", s.queue_depth) }),
        );
    };
    let queued = Instant::now();
    let turn = s.turn.lock().await;
    let id = format!("gen-{:06}", s.next_id.fetch_add(1, Ordering::Relaxed));
    let svc = s.clone();
    let out = tokio::task::spawn_blocking(move || generate(id, &req, &svc.model, svc.dataset.as_ref(), Some(queued))).await;
    drop(turn);
    drop(permit);
    match out {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal", "message": e.to_string() })),
    }
}
