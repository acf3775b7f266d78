//! HTTP front end for the simulated search engine.
//!
//! ```text
//! POST /search {"query": str, "top_k"?: int} -> {"results": [{doc_id, title, preview, score}]}
//! POST /scrape {"doc_id": str}               -> {doc_id, title, text}
//! GET  /health                               -> {"status": "ok", corpus_size, dim}
//! ```
//!
//! Errors are `{"error": code}` with a 4xx/5xx status. The server binds
//! before the index is ready; until then every route answers 503.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::corpus::Document;
use crate::embedding::EmbeddingError;
use crate::retrieval::{RetrievalError, SearchEngine, SearchResult};

pub const DEFAULT_MAX_QUERY_CHARS: usize = 512;

/// Tool name to endpoint binding.
pub const TOOL_ENDPOINTS: [(&str, &str); 2] = [("websearch", "/search"), ("scrape", "/scrape")];

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("empty_query")]
    EmptyQuery,
    #[error("query_too_long")]
    QueryTooLong,
    #[error("bad_top_k")]
    BadTopK,
    #[error("missing_doc_id")]
    MissingDocId,
    #[error("unknown_doc_id")]
    UnknownDocId,
    #[error("bad_request")]
    BadRequest,
    #[error("reranker_unavailable")]
    RerankerUnavailable,
    #[error("embedder_unavailable")]
    EmbedderUnavailable,
    #[error("loading")]
    NotReady,
    #[error("internal")]
    Internal,
}

impl ServiceError {
    pub fn code(self) -> &'static str {
        match self {
            Self::EmptyQuery => "empty_query",
            Self::QueryTooLong => "query_too_long",
            Self::BadTopK => "bad_top_k",
            Self::MissingDocId => "missing_doc_id",
            Self::UnknownDocId => "unknown_doc_id",
            Self::BadRequest => "bad_request",
            Self::RerankerUnavailable => "reranker_unavailable",
            Self::EmbedderUnavailable => "embedder_unavailable",
            Self::NotReady => "loading",
            Self::Internal => "internal",
        }
    }

    pub fn status(self) -> StatusCode {
        match self {
            Self::EmptyQuery | Self::QueryTooLong | Self::BadTopK | Self::MissingDocId | Self::BadRequest => StatusCode::BAD_REQUEST,
            Self::UnknownDocId => StatusCode::NOT_FOUND,
            Self::RerankerUnavailable | Self::EmbedderUnavailable | Self::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Parses an error code back, as found in an error body.
    pub fn from_code(code: &str) -> Option<Self> {
        [
            Self::EmptyQuery,
            Self::QueryTooLong,
            Self::BadTopK,
            Self::MissingDocId,
            Self::UnknownDocId,
            Self::BadRequest,
            Self::RerankerUnavailable,
            Self::EmbedderUnavailable,
            Self::NotReady,
            Self::Internal,
        ]
        .into_iter()
        .find(|e| e.code() == code)
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.code() })).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub corpus_size: usize,
    pub dim: usize,
}

/// Request validation and dispatch, shared by the HTTP handlers and the
/// in-process tool registry.
#[derive(Debug, Clone)]
pub struct SearchService {
    engine: SearchEngine,
    max_query_chars: usize,
}

impl SearchService {
    pub fn new(engine: SearchEngine, max_query_chars: usize) -> Self {
        Self {
            engine,
            max_query_chars: max_query_chars.max(1),
        }
    }

    pub fn engine(&self) -> &SearchEngine {
        &self.engine
    }

    pub fn search(&self, query: &str, top_k: Option<i64>) -> Result<SearchResponse, ServiceError> {
        let query = query.trim_matches(|c: char| c.is_ascii_whitespace());
        if query.is_empty() {
            return Err(ServiceError::EmptyQuery);
        }
        if query.chars().count() > self.max_query_chars {
            return Err(ServiceError::QueryTooLong);
        }
        let cfg = self.engine.config();
        let k = match top_k {
            None => cfg.top_k,
            Some(k) if k >= 1 && k as u64 <= cfg.top_m as u64 => (k as usize).min(cfg.top_k),
            Some(_) => return Err(ServiceError::BadTopK),
        };
        let out = self.engine.search_detailed(query, k).map_err(|e| match e {
            RetrievalError::EmptyQuery => ServiceError::EmptyQuery,
            RetrievalError::RerankerUnavailable(_) => ServiceError::RerankerUnavailable,
            RetrievalError::Embedding(EmbeddingError::RemoteUnavailable(_) | EmbeddingError::DimensionMismatch { .. }) => {
                ServiceError::EmbedderUnavailable
            }
            other => {
                tracing::error!(error = %other, "search failed");
                ServiceError::Internal
            }
        })?;
        Ok(SearchResponse { results: out.results })
    }

    /// Accepts a JSON object `{"query": str, "top_k"?: int}`.
    pub fn search_json(&self, body: &Value) -> Result<SearchResponse, ServiceError> {
        let obj = body.as_object().ok_or(ServiceError::BadRequest)?;
        let query = match obj.get("query") {
            Some(Value::String(q)) => q,
            Some(_) | None => return Err(ServiceError::BadRequest),
        };
        let top_k = match obj.get("top_k") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_i64().ok_or(ServiceError::BadTopK)?),
        };
        self.search(query, top_k)
    }

    pub fn scrape(&self, doc_id: &str) -> Result<Document, ServiceError> {
        if doc_id.is_empty() {
            return Err(ServiceError::MissingDocId);
        }
        self.engine.corpus().get(doc_id).cloned().ok_or(ServiceError::UnknownDocId)
    }

    pub fn scrape_json(&self, body: &Value) -> Result<Document, ServiceError> {
        match body.get("doc_id") {
            Some(Value::String(id)) => self.scrape(id),
            Some(_) => Err(ServiceError::BadRequest),
            None => Err(ServiceError::MissingDocId),
        }
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            status: "ok".into(),
            corpus_size: self.engine.index().len(),
            dim: self.engine.index().dim(),
        }
    }
}

/// Shared server state. The service slot is filled once loading finishes.
#[derive(Debug, Default)]
pub struct ServerState {
    service: OnceLock<SearchService>,
}

impl ServerState {
    pub fn loading() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn ready(service: SearchService) -> Arc<Self> {
        let state = Self::default();
        state.service.set(service).expect("fresh state");
        Arc::new(state)
    }

    /// Installs the service. Returns false if one was already installed.
    pub fn install(&self, service: SearchService) -> bool {
        self.service.set(service).is_ok()
    }

    pub fn service(&self) -> Option<&SearchService> {
        self.service.get()
    }
}

type AppState = Arc<ServerState>;

fn parse_body(body: &[u8]) -> Result<Value, ServiceError> {
    serde_json::from_slice(body).map_err(|_| ServiceError::BadRequest)
}

async fn search_handler(State(state): State<AppState>, body: Bytes) -> Result<Json<SearchResponse>, ServiceError> {
    if state.service().is_none() {
        return Err(ServiceError::NotReady);
    }
    let body = parse_body(&body)?;
    // the remote reranker/embedder clients block
    tokio::task::spawn_blocking(move || state.service().expect("checked").search_json(&body))
        .await
        .map_err(|_| ServiceError::Internal)?
        .map(Json)
}

async fn scrape_handler(State(state): State<AppState>, body: Bytes) -> Result<Json<Document>, ServiceError> {
    let service = state.service().ok_or(ServiceError::NotReady)?;
    let body = parse_body(&body)?;
    service.scrape_json(&body).map(Json)
}

async fn health_handler(State(state): State<AppState>) -> Result<Json<HealthResponse>, ServiceError> {
    state.service().map(|s| Json(s.health())).ok_or(ServiceError::NotReady)
}

async fn log_requests(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_owned();
    let started = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        %method,
        path,
        status = resp.status().as_u16(),
        micros = started.elapsed().as_micros() as u64,
        "request"
    );
    resp
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/search", post(search_handler))
        .route("/scrape", post(scrape_handler))
        .route("/health", get(health_handler))
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own runtime thread. Dropping the handle shuts it
/// down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves `state` on a
/// background thread.
pub fn spawn_server(addr: SocketAddr, state: AppState) -> std::io::Result<ServerHandle> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    let listener = rt.block_on(TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("searchgym-server".into()).spawn(move || {
        rt.block_on(serve(listener, state, async {
            let _ = rx.await;
        }))
    })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
