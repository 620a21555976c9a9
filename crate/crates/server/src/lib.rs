//! HTTP/JSON API over the review queue and the KB.
//!
//! Mutations go through a single writer (the store mutex) which appends to
//! the decision log; every mutation then publishes a fresh immutable
//! snapshot that read handlers clone without touching the writer.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use analogykb::curation::{CurationStore, ReviewItem, ReviewStats, Verdict};
use analogykb::kb::{ConceptPair, Kb, RelationId};
use analogykb::linker::CandidateSet;
use analogykb::Error;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const DEFAULT_PAGE: usize = 20;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, Clone, Default)]
struct Snapshot {
    items: BTreeMap<u64, ReviewItem>,
    stats: ReviewStats,
    queue: Vec<u64>,
}

impl Snapshot {
    fn of(store: &CurationStore) -> Self {
        Snapshot {
            items: store.items().map(|i| (i.id, i.clone())).collect(),
            stats: store.stats(),
            queue: store.queue(0, usize::MAX).iter().map(|i| i.id).collect(),
        }
    }
}

pub struct AppState {
    store: Mutex<CurationStore>,
    snapshot: RwLock<Arc<Snapshot>>,
    kb: Arc<Kb>,
    candidates: Arc<Vec<CandidateSet>>,
}

impl AppState {
    pub fn new(store: CurationStore, kb: Kb, candidates: Vec<CandidateSet>) -> Arc<Self> {
        let snapshot = Snapshot::of(&store);
        Arc::new(AppState {
            store: Mutex::new(store),
            snapshot: RwLock::new(Arc::new(snapshot)),
            kb: Arc::new(kb),
            candidates: Arc::new(candidates),
        })
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut CurationStore, &Kb) -> analogykb::Result<T>) -> Result<T, ApiError> {
        let mut store = self.store.lock().unwrap_or_else(|p| p.into_inner());
        let out = f(&mut store, &self.kb)?;
        let fresh = Arc::new(Snapshot::of(&store));
        *self.snapshot.write().unwrap_or_else(|p| p.into_inner()) = fresh;
        Ok(out)
    }

    /// Approved pairs as of now.
    pub fn export_approved(&self) -> Vec<analogykb::kb::AnalogousRelationPair> {
        self.store
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .export_approved()
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            Error::UnknownRelation(_) => (StatusCode::NOT_FOUND, "unknown_relation"),
            Error::UnknownAnnotator(_) => (StatusCode::BAD_REQUEST, "unknown_annotator"),
            Error::NotCandidate(..) => (StatusCode::UNPROCESSABLE_ENTITY, "not_candidate"),
            Error::DuplicatePair(..) => (StatusCode::CONFLICT, "duplicate_pair"),
            Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    cursor: Option<u64>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    /// Pass back as `cursor` to fetch the next page.
    pub next_cursor: Option<u64>,
    pub total: usize,
}

async fn pending(State(state): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> ApiResult<Page<ReviewItem>> {
    let snap = state.snapshot();
    let cursor = q.cursor.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    let rest: Vec<u64> = snap.queue.iter().copied().filter(|id| *id > cursor).collect();
    let items: Vec<ReviewItem> = rest.iter().take(limit).map(|id| snap.items[id].clone()).collect();
    let next_cursor = (rest.len() > limit).then(|| items.last().map(|i| i.id)).flatten();
    Ok(Json(Page {
        items,
        next_cursor,
        total: snap.queue.len(),
    }))
}

async fn item(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<ReviewItem> {
    state
        .snapshot()
        .items
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| Error::UnknownItem(id).into())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionBody {
    pub annotator: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub note: Option<String>,
}

async fn decide(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(body): Json<DecisionBody>,
) -> ApiResult<ReviewItem> {
    state
        .mutate(|store, _| store.submit_decision(id, &body.annotator, body.verdict, body.note))
        .map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AddBody {
    pub rel_a: RelationId,
    pub rel_b: RelationId,
    pub annotator: String,
}

async fn add(State(state): State<Arc<AppState>>, Json(body): Json<AddBody>) -> ApiResult<ReviewItem> {
    state
        .mutate(|store, kb| store.add_pair(&body.rel_a, &body.rel_b, &body.annotator, kb))
        .map(Json)
}

async fn stats(State(state): State<Arc<AppState>>) -> ApiResult<ReviewStats> {
    Ok(Json(state.snapshot().stats.clone()))
}

async fn annotators(State(state): State<Arc<AppState>>) -> ApiResult<Vec<String>> {
    let store = state.store.lock().unwrap_or_else(|p| p.into_inner());
    Ok(Json(store.annotators().iter().cloned().collect()))
}

async fn candidates(State(state): State<Arc<AppState>>) -> ApiResult<Vec<CandidateSet>> {
    Ok(Json(state.candidates.as_ref().clone()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RelationSummary {
    pub id: RelationId,
    pub label: String,
    pub source: analogykb::ingest::Source,
    pub pair_count: usize,
}

async fn relations(State(state): State<Arc<AppState>>) -> ApiResult<Vec<RelationSummary>> {
    Ok(Json(
        state
            .kb
            .relations()
            .map(|r| RelationSummary {
                id: r.id.clone(),
                label: r.label.clone(),
                source: r.source,
                pair_count: r.pairs.len(),
            })
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn relation_pairs(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Vec<ConceptPair>> {
    let rel = state
        .kb
        .relation(&RelationId::from(id.as_str()))
        .ok_or(Error::UnknownRelation(id))?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(100).min(10_000);
    Ok(Json(rel.pairs.iter().skip(offset).take(limit).cloned().collect()))
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/review/pending", get(pending))
        .route("/api/review/items/{id}", get(item))
        .route("/api/review/items/{id}/decision", post(decide))
        .route("/api/review/add", post(add))
        .route("/api/review/stats", get(stats))
        .route("/api/review/annotators", get(annotators))
        .route("/api/review/candidates", get(candidates))
        .route("/api/kb/relations", get(relations))
        .route("/api/kb/relations/{id}/pairs", get(relation_pairs))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review API listening");
    axum::serve(listener, router(state, static_dir)).await
}
