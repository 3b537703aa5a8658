//! JSON-over-HTTP service: synchronous rewriting, two-annotator labeling
//! rounds with kappa gating and adjudication, and human review of rewrites.

pub mod store;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use disambig_core::detect::DetectError;
use disambig_core::nnkit::checkpoint::Checkpoint;
use disambig_core::nnkit::{EncoderClassifier, Seq2Seq};
use disambig_core::rewrite::{rewrite_text, Decision, RewriteConfig, RewriteError, RewriteModels, RewriteMode, RewriteTrace};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use store::{AuditDecision, LabelKind, Store, StoreError};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";
pub const REQUEST_ID_HEADER: &str = "x-request-id";
const DEFAULT_PAGE: usize = 100;

/// Rewrite checkpoints, resolved per mode when the service starts.
pub struct ModelSet {
    by_mode: HashMap<RewriteMode, Arc<RewriteModels>>,
    missing: HashMap<RewriteMode, String>,
}

impl ModelSet {
    /// Each mode gets the first generator whose contrastive weight fits it;
    /// modes that cannot be served are remembered with the reason.
    pub fn new(
        generators: Vec<Checkpoint<Seq2Seq>>,
        detector: Option<Checkpoint<EncoderClassifier>>,
        decision: Checkpoint<EncoderClassifier>,
    ) -> Result<Self, RewriteError> {
        let mut by_mode = HashMap::new();
        let mut missing = HashMap::new();
        for mode in RewriteMode::ALL {
            let generator = generators.iter().find(|g| {
                g.info.loss_weights.is_some_and(|w| (w.lambda2 > 0.0) == mode.contrastive_generator())
            });
            let reason = match (generator, mode.uses_detect() && detector.is_none()) {
                (None, _) => format!("no generator pretrained {} the contrastive term", if mode.contrastive_generator() { "with" } else { "without" }),
                (_, true) => "no detect checkpoint loaded".to_owned(),
                (Some(g), false) => {
                    let det = if mode.uses_detect() { detector.clone() } else { None };
                    by_mode.insert(mode, Arc::new(RewriteModels::new(g.clone(), det, decision.clone())?));
                    continue;
                }
            };
            missing.insert(mode, reason);
        }
        Ok(ModelSet { by_mode, missing })
    }

    pub fn modes(&self) -> Vec<RewriteMode> {
        RewriteMode::ALL.into_iter().filter(|m| self.by_mode.contains_key(m)).collect()
    }

    fn for_mode(&self, mode: RewriteMode) -> Result<Arc<RewriteModels>, ApiError> {
        self.by_mode.get(&mode).cloned().ok_or_else(|| {
            let reason = self.missing.get(&mode).map(String::as_str).unwrap_or("unavailable");
            ApiError::new(StatusCode::CONFLICT, format!("mode {} cannot be served: {reason}", mode.name()))
        })
    }
}

pub struct AppState {
    store: Mutex<Store>,
    models: Option<ModelSet>,
    rewrite: RewriteConfig,
    budget: Duration,
    requests: AtomicU64,
}

impl AppState {
    pub fn new(store: Store, models: Option<ModelSet>) -> Self {
        AppState {
            store: Mutex::new(store),
            models,
            rewrite: RewriteConfig::default(),
            budget: Duration::from_secs(30),
            requests: AtomicU64::new(0),
        }
    }

    /// Defaults for rewrite requests; a request may override mode and iterations.
    pub fn with_rewrite_config(mut self, config: RewriteConfig) -> Self {
        self.rewrite = config;
        self
    }

    pub fn with_time_budget(mut self, budget: Duration) -> Self {
        self.budget = budget;
        self
    }

    fn store(&self) -> MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Invalid(_) => StatusCode::BAD_REQUEST,
            StoreError::CorruptLog { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<RewriteError> for ApiError {
    fn from(e: RewriteError) -> Self {
        let status = match e {
            RewriteError::EmptyInput
            | RewriteError::NotRelevant(_)
            | RewriteError::TooLong { .. }
            | RewriteError::Detect(DetectError::EmptyContent) => StatusCode::UNPROCESSABLE_ENTITY,
            RewriteError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            RewriteError::ModeConfigMismatch(_) | RewriteError::FingerprintMismatch { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Bodies are parsed by hand so every malformed body is a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn header_id(headers: &HeaderMap) -> Option<String> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
}

fn require_id(explicit: Option<String>, headers: &HeaderMap, what: &str) -> ApiResult<String> {
    explicit
        .filter(|v| !v.trim().is_empty())
        .or_else(|| header_id(headers))
        .ok_or_else(|| ApiError::bad_request(format!("missing {what} id (field or {ANNOTATOR_HEADER} header)")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/rewrite", post(rewrite))
        .route("/rounds", post(create_round).get(list_rounds))
        .route("/rounds/{id}", get(get_round))
        .route("/rounds/{id}/close", post(close_round))
        .route("/rounds/{id}/labels", get(final_labels))
        .route("/tasks", get(tasks))
        .route("/labels", post(submit_label))
        .route("/agreement", get(agreement))
        .route("/adjudication", get(adjudication_queue).post(adjudicate))
        .route("/audits", post(add_audits).get(list_audits))
        .route("/audits/next", get(next_audit))
        .route("/audits/summary", get(audit_summary))
        .route("/audits/{id}", get(get_audit))
        .route("/audits/{id}/decision", post(decide_audit))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let modes: Vec<&str> = state.models.as_ref().map(|m| m.modes().into_iter().map(RewriteMode::name).collect()).unwrap_or_default();
    Json(json!({ "status": "ok", "models_loaded": state.models.is_some(), "modes": modes }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RewriteRequest {
    text: String,
    decision_label: Decision,
    #[serde(default)]
    mode: Option<RewriteMode>,
    #[serde(default)]
    iterations: Option<usize>,
}

#[derive(Serialize)]
struct RewriteResponse {
    request_id: String,
    #[serde(flatten)]
    trace: RewriteTrace,
}

async fn rewrite(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let request_id = headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
        .unwrap_or_else(|| format!("req-{}", state.requests.fetch_add(1, Ordering::Relaxed) + 1));
    let mut response = match run_rewrite(&state, &request_id, &body).await {
        Ok(trace) => Json(RewriteResponse { request_id: request_id.clone(), trace }).into_response(),
        Err(e) => e.into_response(),
    };
    if let Ok(v) = HeaderValue::from_str(&request_id) {
        response.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    response
}

async fn run_rewrite(state: &Arc<AppState>, request_id: &str, body: &Bytes) -> ApiResult<RewriteTrace> {
    let req: RewriteRequest = parse(body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("text is empty"));
    }
    let models = state
        .models
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no rewrite models are loaded"))?;
    let mut config = state.rewrite.clone();
    if let Some(mode) = req.mode {
        config.mode = mode;
    }
    if let Some(iterations) = req.iterations {
        config.iterations = iterations;
    }
    let models = models.for_mode(config.mode)?;
    tracing::info!(request_id, mode = config.mode.name(), "rewrite");
    let job = tokio::task::spawn_blocking(move || rewrite_text(&req.text, req.decision_label, &models, &config));
    match tokio::time::timeout(state.budget, job).await {
        Err(_) => Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "rewrite exceeded the time budget")),
        Ok(Err(join)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, join.to_string())),
        Ok(Ok(result)) => Ok(result?),
    }
}

#[derive(Deserialize)]
struct NewItem {
    sentence_id: String,
    text: String,
}

#[derive(Deserialize)]
struct NewRound {
    kind: LabelKind,
    annotators: [String; 2],
    items: Vec<NewItem>,
}

async fn create_round(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewRound = parse(&body)?;
    let items = req.items.into_iter().map(|i| (i.sentence_id, i.text)).collect();
    let round = state.store().create_round(req.kind, req.annotators, items)?;
    Ok((StatusCode::CREATED, Json(round)))
}

async fn list_rounds(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "rounds": state.store().rounds() }))
}

async fn get_round(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store();
    Ok(Json(json!(store.round(&id)?)))
}

#[derive(Deserialize, Default)]
struct CloseRequest {
    #[serde(default, rename = "override")]
    force: bool,
}

async fn close_round(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: CloseRequest = if body.is_empty() { CloseRequest::default() } else { parse(&body)? };
    let mut store = state.store();
    let agreement = store.close_round(&id, req.force)?;
    let round = store.round(&id)?;
    Ok(Json(json!({ "round": round, "agreement": agreement })))
}

async fn final_labels(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let labels: Vec<_> = state
        .store()
        .final_labels(&id)?
        .into_iter()
        .map(|(item_id, label)| json!({ "item_id": item_id, "label": label }))
        .collect();
    Ok(Json(json!({ "round_id": id, "labels": labels })))
}

#[derive(Deserialize)]
struct TasksQuery {
    annotator: Option<String>,
    cursor: Option<String>,
    limit: Option<usize>,
}

async fn tasks(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<TasksQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let annotator = require_id(q.annotator, &headers, "annotator")?;
    let store = state.store();
    let (tasks, next) = store.tasks(&annotator, q.cursor.as_deref(), q.limit.unwrap_or(DEFAULT_PAGE).max(1));
    Ok(Json(json!({ "tasks": tasks, "next_cursor": next })))
}

#[derive(Deserialize)]
struct LabelRequest {
    task_id: String,
    label: bool,
    #[serde(default)]
    annotator: Option<String>,
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: LabelRequest = parse(&body)?;
    let annotator = require_id(req.annotator, &headers, "annotator")?;
    let task = state.store().submit_label(&req.task_id, &annotator, req.label)?;
    Ok((StatusCode::CREATED, Json(task)))
}

#[derive(Deserialize)]
struct RoundQuery {
    round: Option<String>,
    #[serde(default)]
    pending: Option<bool>,
}

async fn agreement(State(state): State<Arc<AppState>>, Query(q): Query<RoundQuery>) -> ApiResult<Json<serde_json::Value>> {
    let round = q.round.ok_or_else(|| ApiError::bad_request("missing `round` query parameter"))?;
    Ok(Json(json!(state.store().agreement(&round)?)))
}

async fn adjudication_queue(State(state): State<Arc<AppState>>, Query(q): Query<RoundQuery>) -> Json<serde_json::Value> {
    let store = state.store();
    let items = store.adjudication_queue(q.round.as_deref(), q.pending.unwrap_or(true));
    Json(json!({ "items": items }))
}

#[derive(Deserialize)]
struct AdjudicateRequest {
    round_id: String,
    item_id: String,
    label: bool,
    #[serde(default)]
    adjudicator: Option<String>,
}

async fn adjudicate(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: AdjudicateRequest = parse(&body)?;
    let adjudicator = require_id(req.adjudicator, &headers, "adjudicator")?;
    let record = state.store().adjudicate(&req.round_id, &req.item_id, req.label, &adjudicator)?;
    Ok((StatusCode::CREATED, Json(record)))
}

#[derive(Deserialize)]
struct NewAudit {
    #[serde(default)]
    original: Option<String>,
    trace: RewriteTrace,
}

#[derive(Deserialize)]
struct NewAudits {
    items: Vec<NewAudit>,
}

async fn add_audits(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewAudits = parse(&body)?;
    let ids = state.store().add_audits(req.items.into_iter().map(|a| (a.original, a.trace)).collect())?;
    Ok((StatusCode::CREATED, Json(json!({ "item_ids": ids }))))
}

#[derive(Deserialize)]
struct PageQuery {
    cursor: Option<String>,
    limit: Option<usize>,
}

async fn list_audits(State(state): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> Json<serde_json::Value> {
    let store = state.store();
    let (items, next) = store.audits(q.cursor.as_deref(), q.limit.unwrap_or(DEFAULT_PAGE).max(1));
    Json(json!({ "items": items, "next_cursor": next }))
}

async fn get_audit(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store();
    Ok(Json(json!(store.audit(&id)?)))
}

#[derive(Deserialize)]
struct ReviewerQuery {
    reviewer: Option<String>,
}

async fn next_audit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ReviewerQuery>,
) -> ApiResult<Response> {
    let reviewer = require_id(q.reviewer, &headers, "reviewer")?;
    let store = state.store();
    Ok(match store.next_audit(&reviewer) {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn audit_summary(State(state): State<Arc<AppState>>, Query(q): Query<ReviewerQuery>) -> Json<serde_json::Value> {
    Json(json!(state.store().audit_summary(q.reviewer.as_deref())))
}

#[derive(Deserialize)]
struct DecisionRequest {
    #[serde(default)]
    reviewer: Option<String>,
    disambiguation: bool,
    fidelity: bool,
    #[serde(default)]
    notes: String,
}

async fn decide_audit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: DecisionRequest = parse(&body)?;
    let reviewer = require_id(req.reviewer, &headers, "reviewer")?;
    let decision = AuditDecision { reviewer, disambiguation: req.disambiguation, fidelity: req.fidelity, notes: req.notes };
    let item = state.store().decide_audit(&id, decision)?;
    Ok((StatusCode::CREATED, Json(item)))
}
