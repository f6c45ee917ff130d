//! HTTP/JSON facade over a loaded index.
//!
//! * `POST /v1/search` runs one workflow and returns per-word attributions.
//! * `GET /v1/stats` returns the manifest and storage accounting.
//! * `GET /v1/doc/{id}` returns one stored document.
//!
//! The index is immutable once loaded and shared across requests without locks.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use colberter::encoder::{Encoder, PrecomputedEncoder};
use colberter::index::{self, IndexManifest, IndexSet, StorageStats};
use colberter::retrieve::{self, default_k_cand, RankedEntry, SearchParams, WorkflowKind};
use colberter::tokenizer::{split_whole_words, word_key};
use colberter::Error;

pub const MAX_K: usize = 100;
pub const MAX_K_CAND: usize = 10_000;
pub const SNIPPET_CHARS: usize = 200;

/// An index together with the encoder used for queries.
pub struct LoadedIndex {
    pub index: IndexSet,
    pub encoder: Box<dyn Encoder>,
    pub storage: StorageStats,
}

impl LoadedIndex {
    pub fn new(index: IndexSet, encoder: Box<dyn Encoder>) -> colberter::Result<Self> {
        let storage = StorageStats::of(&index)?;
        Ok(Self {
            index,
            encoder,
            storage,
        })
    }

    /// Loads an index directory; `query_embeddings` is needed only for indexes
    /// built from precomputed embeddings.
    pub fn open(dir: impl AsRef<Path>, query_embeddings: Option<&Path>) -> colberter::Result<Self> {
        let index = index::load(dir)?;
        let table = query_embeddings.map(PrecomputedEncoder::load).transpose()?;
        let encoder = index.manifest.encoder.instantiate(table)?;
        Self::new(index, encoder)
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    index: Option<Arc<LoadedIndex>>,
}

impl AppState {
    pub fn new(index: LoadedIndex) -> Self {
        Self {
            index: Some(Arc::new(index)),
        }
    }

    /// State without an index; every endpoint answers 503.
    pub fn unloaded() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default = "default_workflow")]
    pub workflow: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub k_cand: Option<usize>,
    /// Encoder lookup key for precomputed query embeddings; defaults to the query text.
    #[serde(default)]
    pub query_id: Option<String>,
}

fn default_workflow() -> String {
    WorkflowKind::default().name().to_string()
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordView {
    /// Surface form as it first appears in the document.
    pub word: String,
    pub stem: String,
    pub removed: bool,
    pub matched: bool,
    /// Sum of the query-word contributions routed to this word.
    pub contribution: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    pub doc_id: String,
    pub snippet: String,
    pub s_total: f64,
    pub s_cls: f64,
    pub s_token: f64,
    pub sigma_gamma: f64,
    pub words: Vec<WordView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub query: String,
    pub workflow: WorkflowKind,
    pub candidate_count: usize,
    pub results: Vec<ResultView>,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub manifest: IndexManifest,
    pub storage: StorageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocWord {
    pub stem: String,
    pub gate: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocResponse {
    pub doc_id: String,
    pub ordinal: u32,
    pub text: String,
    pub words: Vec<DocWord>,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_loaded() -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: "index not loaded".into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_)
            | Error::SparseRequiresExactMatch
            | Error::UniDisabled
            | Error::Dimension { .. } => StatusCode::BAD_REQUEST,
            Error::UnknownDoc(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(SNIPPET_CHARS).collect()
}

/// First surface form of every stem in `text`, lowercased.
fn surface_forms(text: &str, stemming: bool) -> HashMap<String, String> {
    let mut forms = HashMap::new();
    for w in split_whole_words(text) {
        let lower = w.text.to_lowercase();
        forms.entry(word_key(&w.text, stemming)).or_insert(lower);
    }
    forms
}

/// Maps a ranked entry onto its stored words and routes attributions to them.
pub fn result_view(index: &IndexSet, entry: &RankedEntry) -> ResultView {
    let doc = index.fetch_ordinal(entry.ordinal);
    let text = &index.texts[entry.ordinal as usize];
    let forms = surface_forms(text, index.manifest.stemming);
    let mut contributions: Vec<Option<f64>> = vec![None; doc.words.len()];
    for a in &entry.breakdown.attributions {
        if let Some(i) = a.passage_index {
            *contributions[i].get_or_insert(0.0) += a.contribution;
        }
    }
    let surface = |stem: &str| forms.get(stem).cloned().unwrap_or_else(|| stem.to_string());
    let mut words: Vec<WordView> = doc
        .words
        .iter()
        .zip(contributions)
        .map(|(w, c)| WordView {
            word: surface(&w.stem),
            stem: w.stem.clone(),
            removed: false,
            matched: c.is_some(),
            contribution: c,
        })
        .collect();
    words.extend(doc.removed.iter().map(|stem| WordView {
        word: surface(stem),
        stem: stem.clone(),
        removed: true,
        matched: false,
        contribution: None,
    }));
    let b = &entry.breakdown;
    ResultView {
        doc_id: entry.doc_id.clone(),
        snippet: snippet(text),
        s_total: b.s_total,
        s_cls: b.s_cls,
        s_token: b.s_token,
        sigma_gamma: b.sigma_gamma,
        words,
    }
}

/// Validates a request and runs it; shared by the HTTP handler and the CLI.
pub fn run_search(loaded: &LoadedIndex, req: &SearchRequest) -> Result<SearchResponse, ApiError> {
    let start = Instant::now();
    let workflow: WorkflowKind = req.workflow.parse()?;
    if req.k == 0 || req.k > MAX_K {
        return Err(ApiError::bad_request(format!("k must be in 1..={MAX_K}, got {}", req.k)));
    }
    let k_cand = req.k_cand.unwrap_or_else(|| default_k_cand(req.k).min(MAX_K_CAND));
    if k_cand > MAX_K_CAND {
        return Err(ApiError::bad_request(format!(
            "k_cand must be at most {MAX_K_CAND}, got {k_cand}"
        )));
    }
    let index = &loaded.index;
    let key = req.query_id.as_deref().unwrap_or(&req.query);
    let q = retrieve::encode_query(index, &index.heads, loaded.encoder.as_ref(), key, &req.query)?;
    let params = SearchParams::new(workflow, req.k).with_k_cand(k_cand);
    let list = retrieve::search_encoded(&q, index, &index.heads, params)?;
    let results = list.entries.iter().map(|e| result_view(index, e)).collect();
    Ok(SearchResponse {
        query: req.query.clone(),
        workflow,
        candidate_count: list.candidate_count,
        results,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn loaded(state: &AppState) -> Result<Arc<LoadedIndex>, ApiError> {
    state.index.clone().ok_or_else(ApiError::not_loaded)
}

async fn handle_search(State(state): State<AppState>, body: Bytes) -> Result<Json<SearchResponse>, ApiError> {
    let loaded = loaded(&state)?;
    let req: SearchRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    let resp = tokio::task::spawn_blocking(move || run_search(&loaded, &req))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("search task failed: {e}"),
        })??;
    Ok(Json(resp))
}

async fn handle_stats(State(state): State<AppState>) -> Result<Json<StatsResponse>, ApiError> {
    let loaded = loaded(&state)?;
    Ok(Json(StatsResponse {
        manifest: loaded.index.manifest.clone(),
        storage: loaded.storage.clone(),
    }))
}

async fn handle_doc(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<DocResponse>, ApiError> {
    let loaded = loaded(&state)?;
    let doc = loaded.index.fetch(&id)?;
    Ok(Json(DocResponse {
        doc_id: id,
        ordinal: doc.ordinal,
        text: loaded.index.texts[doc.ordinal as usize].clone(),
        words: doc
            .words
            .iter()
            .map(|w| DocWord {
                stem: w.stem.clone(),
                gate: w.gate,
            })
            .collect(),
        removed: doc.removed.to_vec(),
    }))
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/v1/search", post(handle_search))
        .route("/v1/stats", get(handle_stats))
        .route("/v1/doc/{id}", get(handle_doc))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
