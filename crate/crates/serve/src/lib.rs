//! Read-only HTTP service over a trained student and a precomputed photo
//! gallery. All routes live under `/v1`:
//!
//! ```text
//! GET  /v1/health          {"status":"ok","gallery_size":M,"checkpoint":sha256}
//! GET  /v1/classes         {"classes":[...]}
//! POST /v1/retrieve        {"image":base64 PNG,"k":N} -> {"results":[{id,class,score,thumbnail_url}],"latency_ms":f}
//! GET  /v1/thumbnail/{id}  image bytes
//! ```
//!
//! Query images are alpha-flattened onto white and resized to the encoder
//! input, the same preprocessing the offline `retrieve` command uses.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sherrylab::datamodel::{DataError, SampleImage};
use sherrylab::imaging::encode_png;
use sherrylab::retrieval::{retrieve_image, RetrievalError};
use sherrylab::trainer::TrainError;
use sherrylab::{load_manifest, Checkpoint, Domain, EncoderState, FeatureIndex};
use thiserror::Error;
use tokio::sync::oneshot;
use tower_http::cors::{Any, CorsLayer};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
    #[error("port {port} unavailable: {message}")]
    PortUnavailable { port: u16, message: String },
    #[error(transparent)]
    Checkpoint(#[from] TrainError),
    #[error(transparent)]
    Gallery(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a thumbnail's bytes come from.
#[derive(Debug, Clone)]
enum Thumbnail {
    File(PathBuf),
    Pixels(Arc<ndarray::Array3<f64>>),
}

/// Everything a request can see. Immutable once built.
#[derive(Debug)]
pub struct ServiceState {
    pub student: EncoderState,
    pub gallery: FeatureIndex,
    pub checkpoint_hash: String,
    thumbnails: HashMap<String, Thumbnail>,
}

impl ServiceState {
    /// Checks that the gallery is a photo index in the student's feature space.
    pub fn new(student: EncoderState, gallery: FeatureIndex, checkpoint_hash: String) -> Result<Self, ServeError> {
        if gallery.dim() != student.retrieval_dim() {
            return Err(ServeError::ArtifactMismatch(format!(
                "gallery features have {} dims, model produces {}",
                gallery.dim(),
                student.retrieval_dim()
            )));
        }
        if gallery.domain != Domain::Photo {
            return Err(ServeError::ArtifactMismatch(format!("gallery domain is {}, expected photo", gallery.domain)));
        }
        if gallery.is_empty() {
            return Err(ServeError::Gallery(RetrievalError::EmptyGallery));
        }
        Ok(ServiceState { student, gallery, checkpoint_hash, thumbnails: HashMap::new() })
    }

    /// Loads a checkpoint directory and a gallery feature archive. With a
    /// manifest, gallery ids found in it get thumbnails.
    pub fn load(checkpoint: &Path, gallery: &Path, manifest: Option<&Path>) -> Result<Self, ServeError> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let hash = Checkpoint::encoder_hash(checkpoint)?;
        let index = FeatureIndex::load(gallery)?;
        let mut state = ServiceState::new(ckpt.encoder, index, hash)?;
        if let Some(path) = manifest {
            let m = load_manifest(path)?;
            let ids: BTreeSet<&str> = state.gallery.ids.iter().map(String::as_str).collect();
            for s in m.train_samples.iter().chain(&m.test_samples).filter(|s| ids.contains(s.id.as_str())) {
                let thumb = match &s.image {
                    SampleImage::File { path, .. } => Thumbnail::File(path.clone()),
                    SampleImage::Pixels(p) => Thumbnail::Pixels(p.clone()),
                };
                state.thumbnails.insert(s.id.clone(), thumb);
            }
        }
        Ok(state)
    }

    pub fn classes(&self) -> Vec<String> {
        self.gallery.labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct RetrieveRequest {
    pub image: String,
    pub k: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub id: String,
    pub class: String,
    pub score: f64,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<RetrievedItem>,
    pub latency_ms: f64,
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": kind, "message": message.into()}))).into_response()
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "gallery_size": state.gallery.len(), "checkpoint": state.checkpoint_hash}))
}

async fn classes(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(json!({"classes": state.classes()}))
}

fn decode_image(field: &str) -> Result<Vec<u8>, String> {
    // Canvas exports often arrive as data URLs.
    let payload = match field.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => field,
    };
    base64::engine::general_purpose::STANDARD.decode(payload.trim()).map_err(|e| format!("image is not base64: {e}"))
}

async fn retrieve(State(state): State<Arc<ServiceState>>, body: Result<Json<RetrieveRequest>, JsonRejection>) -> Response {
    let started = Instant::now();
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "BadRequest", e.body_text()),
    };
    let m = state.gallery.len();
    if req.k < 1 || req.k as u64 > m as u64 {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "BadK", format!("k must lie in 1..={m}, got {}", req.k));
    }
    let bytes = match decode_image(&req.image) {
        Ok(b) => b,
        Err(msg) => return error(StatusCode::BAD_REQUEST, "BadImage", msg),
    };
    let k = req.k as usize;
    let worker = state.clone();
    let hits = tokio::task::spawn_blocking(move || retrieve_image(&worker.student, &worker.gallery, &bytes, k)).await;
    let hits = match hits {
        Ok(Ok(h)) => h,
        Ok(Err(RetrievalError::Image(e))) => return error(StatusCode::BAD_REQUEST, "BadImage", e.to_string()),
        Ok(Err(e @ RetrievalError::BadK { .. })) => return error(StatusCode::UNPROCESSABLE_ENTITY, "BadK", e.to_string()),
        Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, "RetrievalFailed", e.to_string()),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, "RetrievalFailed", e.to_string()),
    };
    let results = hits
        .into_iter()
        .map(|h| RetrievedItem { thumbnail_url: format!("/v1/thumbnail/{}", h.id), id: h.id, class: h.class, score: h.score })
        .collect();
    Json(RetrieveResponse { results, latency_ms: started.elapsed().as_secs_f64() * 1e3 }).into_response()
}

async fn thumbnail(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(thumb) = state.thumbnails.get(&id).cloned() else {
        return error(StatusCode::NOT_FOUND, "NotFound", format!("no thumbnail for '{id}'"));
    };
    let loaded = tokio::task::spawn_blocking(move || match thumb {
        Thumbnail::File(path) => {
            let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
                Some("jpg" | "jpeg") => "image/jpeg",
                _ => "image/png",
            };
            std::fs::read(&path).map(|b| (mime, b)).map_err(|e| e.to_string())
        }
        Thumbnail::Pixels(p) => encode_png(&p).map(|b| ("image/png", b)).map_err(|e| e.to_string()),
    })
    .await;
    match loaded {
        Ok(Ok((mime, bytes))) => ([(header::CONTENT_TYPE, mime)], Bytes::from(bytes)).into_response(),
        Ok(Err(msg)) => error(StatusCode::INTERNAL_SERVER_ERROR, "ThumbnailUnavailable", msg),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "ThumbnailUnavailable", e.to_string()),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/classes", get(classes))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/thumbnail/{id}", get(thumbnail))
        .layer(cors)
        .with_state(state)
}

fn bind(addr: SocketAddr) -> Result<std::net::TcpListener, ServeError> {
    let listener = std::net::TcpListener::bind(addr)
        .map_err(|e| ServeError::PortUnavailable { port: addr.port(), message: e.to_string() })?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// A service running on its own runtime thread. Dropping it shuts it down.
pub struct RunningService {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl RunningService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn start(state: ServiceState, addr: SocketAddr) -> Result<RunningService, ServeError> {
    let listener = bind(addr)?;
    let local = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(Arc::new(state));
    let thread = thread::spawn(move || {
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener from a live socket");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(RunningService { addr: local, shutdown: Some(tx), thread: Some(thread) })
}

/// Serves in the foreground until the process is interrupted.
pub fn run(state: ServiceState, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = bind(addr)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let app = router(Arc::new(state));
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app).await
    })?;
    Ok(())
}
