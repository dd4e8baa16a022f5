//! HTTP service over a trace store and its review queue.
//!
//! Traces are read-only here. The only writes are appends to the store's
//! annotation log, serialized through one lock so that status changes can be
//! compare-and-set.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Mutex;

use uniact_core::filter::{replay_digests, task_for, ReviewAnnotation};
use uniact_core::reflection::Correction;
use uniact_core::sim::{render_som, SomOverlay};
use uniact_core::store::annotations::{assignee, fold_status};
use uniact_core::store::{
    AnnotationBody, AnnotationEntry, IndexEntry, QueueStatus, StoreError, TraceStore,
};
use uniact_core::{parse_action, Platform, PlatformProfile, TaskRegistry, Trace};

pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
    /// Grammar error class for action fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl FieldError {
    fn new(field: &str, message: impl ToString) -> Self {
        Self {
            field: field.into(),
            message: message.to_string(),
            class: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("trace `{0}` not found")]
    NotFound(String),
    #[error("validation failed")]
    Invalid(Vec<FieldError>),
    #[error("status is {}, not {}", current.as_str(), expected.as_str())]
    Conflict {
        current: QueueStatus,
        expected: QueueStatus,
    },
    #[error("store error: {0}")]
    Store(#[from] StoreError),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (code, body) = match self {
            ApiError::BadRequest(_) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "bad_request", "message": message}),
            ),
            ApiError::NotFound(_) | ApiError::Store(StoreError::NotFound(_)) => (
                StatusCode::NOT_FOUND,
                json!({"error": "not_found", "message": message}),
            ),
            ApiError::Invalid(fields) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "validation", "message": message, "fields": fields}),
            ),
            ApiError::Conflict { current, .. } => (
                StatusCode::CONFLICT,
                json!({"error": "conflict", "message": message, "current": current}),
            ),
            ApiError::Store(_) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "store", "message": message}),
            ),
        };
        (code, Json(body)).into_response()
    }
}

struct Inner {
    store: TraceStore,
    registry: TaskRegistry,
    writes: Mutex<()>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(store: TraceStore, registry: TaskRegistry) -> Self {
        Self(Arc::new(Inner {
            store,
            registry,
            writes: Mutex::new(()),
        }))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/traces", get(list_traces))
        .route("/traces/{id}", get(get_trace))
        .route("/traces/{id}/raw", get(get_raw))
        .route("/traces/{id}/annotations", post(post_annotation))
        .route("/traces/{id}/status", post(post_status))
        .route("/annotations", get(list_annotations))
        .route("/validate-action", post(validate_action))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    #[serde(flatten)]
    pub entry: IndexEntry,
    pub status: QueueStatus,
    pub assigned_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub items: Vec<TraceSummary>,
}

fn number(params: &HashMap<String, String>, key: &str, default: usize) -> Result<usize, ApiError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| {
            ApiError::BadRequest(format!("`{key}` must be a non-negative integer, got `{v}`"))
        }),
    }
}

fn entries_for<'a>(
    all: &'a [AnnotationEntry],
    id: &'a str,
) -> impl Iterator<Item = &'a AnnotationEntry> + 'a {
    all.iter().filter(move |e| e.trace_id == id)
}

/// Pages are numbered from 1 and ordered by trace id.
async fn list_traces(
    State(st): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<TracePage>, ApiError> {
    if let Some(k) = params
        .keys()
        .find(|k| !["status", "page", "page_size"].contains(&k.as_str()))
    {
        return Err(ApiError::BadRequest(format!("unknown parameter `{k}`")));
    }
    let status: Option<QueueStatus> = params
        .get("status")
        .map(|s| s.parse().map_err(ApiError::BadRequest))
        .transpose()?;
    let page = number(&params, "page", 1)?;
    let page_size = number(&params, "page_size", DEFAULT_PAGE_SIZE)?;
    if page == 0 {
        return Err(ApiError::BadRequest("`page` starts at 1".into()));
    }
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::BadRequest(format!(
            "`page_size` must be in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let log = st.0.store.annotations().entries()?;
    let mut items = Vec::new();
    for id in st.0.store.list_ids()? {
        let s = fold_status(entries_for(&log, &id));
        if status.is_some_and(|want| want != s) {
            continue;
        }
        let trace = st.0.store.load_trace(&id)?;
        items.push(TraceSummary {
            entry: IndexEntry::from(&trace),
            status: s,
            assigned_to: assignee(entries_for(&log, &id)),
        });
    }
    let total = items.len();
    let items = items
        .into_iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .collect();
    Ok(Json(TracePage {
        page,
        page_size,
        total,
        items,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDetail {
    /// The stored record, field for field.
    pub record: Value,
    /// One Set-of-Mark overlay per step.
    pub overlays: Vec<SomOverlay>,
    /// True when re-running the actions in the simulator reproduces every
    /// recorded digest. False when they differ or the task is unknown.
    pub replay_verified: bool,
    pub status: QueueStatus,
    pub assigned_to: Option<String>,
}

fn load(st: &AppState, id: &str) -> Result<Trace, ApiError> {
    match st.0.store.load_trace(id) {
        Err(StoreError::NotFound(_)) => Err(ApiError::NotFound(id.to_string())),
        other => Ok(other?),
    }
}

async fn get_trace(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<TraceDetail>, ApiError> {
    let trace = load(&st, &id)?;
    let bytes = st.0.store.load_bytes(&id)?;
    let record: Value = serde_json::from_slice(&bytes)
        .map_err(|e| ApiError::Store(StoreError::CorruptRecord(e.to_string())))?;
    let replay_verified = task_for(&trace, &st.0.registry)
        .is_some_and(|task| replay_digests(&trace, Some(&task)).is_ok());
    let log = st.0.store.annotations().entries()?;
    Ok(Json(TraceDetail {
        record,
        overlays: trace
            .steps
            .iter()
            .map(|s| render_som(&s.observation).1)
            .collect(),
        replay_verified,
        status: fold_status(entries_for(&log, &id)),
        assigned_to: assignee(entries_for(&log, &id)),
    }))
}

async fn get_raw(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    load(&st, &id)?;
    let bytes = st.0.store.load_bytes(&id)?;
    Ok((
        [(axum::http::header::CONTENT_TYPE, "application/json")],
        bytes,
    )
        .into_response())
}

/// Body of an annotation POST: a review or a correction, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Submission {
    Review(ReviewAnnotation),
    Correction(Correction),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Created {
    pub annotation_id: String,
    pub seq: usize,
    pub status: QueueStatus,
}

fn grammar_error(field: &str, text: &str, platform: Platform) -> Option<FieldError> {
    parse_action(text, &PlatformProfile::new(platform))
        .err()
        .map(|e| FieldError {
            field: field.into(),
            message: e.to_string(),
            class: Some(e.class().into()),
        })
}

/// Turns a raw body into a submission, reporting every problem by field.
fn parse_submission(body: &Value, trace: &Trace) -> Result<Submission, ApiError> {
    if let Some(text) = body.get("corrected_action").and_then(Value::as_str) {
        if let Some(e) = grammar_error("corrected_action", text, trace.platform) {
            return Err(ApiError::Invalid(vec![e]));
        }
    }
    let sub: Submission = serde_json::from_value(body.clone())
        .map_err(|e| ApiError::Invalid(vec![FieldError::new("body", e)]))?;
    let trace_id = match &sub {
        Submission::Review(r) => &r.trace_id,
        Submission::Correction(c) => &c.trace_id,
    };
    if *trace_id != trace.trace_id {
        return Err(ApiError::Invalid(vec![FieldError::new(
            "trace_id",
            format!(
                "body names `{trace_id}` but the path names `{}`",
                trace.trace_id
            ),
        )]));
    }
    let checked = match &sub {
        Submission::Review(r) => r
            .validate(trace)
            .map_err(|e| FieldError::new("error_step", e)),
        Submission::Correction(c) => c.validate(trace).map_err(|e| {
            let field = match e {
                uniact_core::reflection::ReflectionError::IndexOutOfBounds { .. } => "step_index",
                _ => "corrected_action",
            };
            FieldError::new(field, e)
        }),
    };
    checked.map_err(|e| ApiError::Invalid(vec![e]))?;
    Ok(sub)
}

async fn post_annotation(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<Value>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let trace = load(&st, &id)?;
    let sub = parse_submission(&body, &trace)?;
    let body = match sub {
        Submission::Review(r) => AnnotationBody::Review(r),
        Submission::Correction(c) => AnnotationBody::Correction(c),
    };
    let _guard = st.0.writes.lock().await;
    let log = st.0.store.annotations();
    let entry = log.append(&id, body)?;
    let status = log.status_of(&id)?;
    Ok((
        StatusCode::CREATED,
        Json(Created {
            annotation_id: entry.annotation_id,
            seq: entry.seq,
            status,
        }),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusChange {
    pub from: QueueStatus,
    pub to: QueueStatus,
    #[serde(default)]
    pub assigned_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusView {
    pub trace_id: String,
    pub status: QueueStatus,
    pub assigned_to: Option<String>,
}

/// Compare-and-set on the queue status: applies only if the current status
/// equals `from`.
async fn post_status(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(change): Json<StatusChange>,
) -> Result<Json<StatusView>, ApiError> {
    load(&st, &id)?;
    if !change.from.can_move_to(change.to) {
        return Err(ApiError::Invalid(vec![FieldError::new(
            "to",
            format!(
                "cannot move from {} to {}",
                change.from.as_str(),
                change.to.as_str()
            ),
        )]));
    }
    let _guard = st.0.writes.lock().await;
    let log = st.0.store.annotations();
    let current = log.status_of(&id)?;
    if current != change.from {
        return Err(ApiError::Conflict {
            current,
            expected: change.from,
        });
    }
    log.append(
        &id,
        AnnotationBody::Status {
            from: change.from,
            to: change.to,
            assigned_to: change.assigned_to,
        },
    )?;
    let entries = log.entries()?;
    Ok(Json(StatusView {
        status: fold_status(entries_for(&entries, &id)),
        assigned_to: assignee(entries_for(&entries, &id)),
        trace_id: id,
    }))
}

/// The whole log in append order, optionally for one trace.
async fn list_annotations(
    State(st): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<Vec<AnnotationEntry>>, ApiError> {
    let mut entries = st.0.store.annotations().entries()?;
    if let Some(id) = params.get("trace_id") {
        entries.retain(|e| &e.trace_id == id);
    }
    Ok(Json(entries))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidateRequest {
    pub text: String,
    #[serde(default = "shared")]
    pub platform: Platform,
}

fn shared() -> Platform {
    Platform::Shared
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidateResponse {
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

async fn validate_action(Json(req): Json<ValidateRequest>) -> Json<ValidateResponse> {
    Json(
        match parse_action(&req.text, &PlatformProfile::new(req.platform)) {
            Ok(a) => ValidateResponse {
                valid: true,
                canonical: Some(a.serialize()),
                class: None,
                message: None,
            },
            Err(e) => ValidateResponse {
                valid: false,
                canonical: None,
                class: Some(e.class().into()),
                message: Some(e.to_string()),
            },
        },
    )
}
