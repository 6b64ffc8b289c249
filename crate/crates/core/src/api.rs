//! HTTP surface over [`Engine`].
//!
//! Engine calls block on the provider, so every handler hops to the
//! blocking pool.

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::edits::{EditBatch, MemoryEdit, TurnEdit};
use crate::engine::{ClientEvent, Engine, FindingSources, FindingsPoll, InputSource, MemorySource, Strategy};
use crate::error::Error;
use crate::ids::{BatchId, DialogueId, FindingId, MemoryId, RunId};
use crate::inference::{FindingSet, PrivacyFinding};
use crate::metrics::{GroupBy, Window};
use crate::sensitivity::ColorSpec;

#[derive(Clone)]
pub struct AppState {
    pub engine: Engine,
    pub default_strategy: Strategy,
}

pub fn router(engine: Engine, default_strategy: Strategy) -> Router {
    Router::new()
        .route("/dialogues", post(create_dialogue))
        .route("/dialogues/{id}/messages", post(post_message))
        .route("/dialogues/{id}/findings", get(get_findings))
        .route("/dialogues/{id}/edits", post(post_edits))
        .route("/findings/{fid}/sources", get(get_sources))
        .route("/findings/{fid}/resolve", post(resolve_finding))
        .route("/memories", get(list_memories))
        .route("/memories/{mid}", axum::routing::patch(patch_memory).delete(delete_memory))
        .route("/metrics/summary", get(metrics_summary))
        .route("/metrics/export", get(metrics_export))
        .route("/metrics/events", post(post_metrics_event))
        .with_state(AppState { engine, default_strategy })
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::UnknownDialogue(_) | Error::UnknownTurn(_) | Error::UnknownMemory(_) | Error::UnknownFinding(_) => {
            StatusCode::NOT_FOUND
        }
        Error::AlreadyDeleted(_) => StatusCode::CONFLICT,
        Error::EmptyText
        | Error::InvalidRequest(_)
        | Error::InvalidPayload { .. }
        | Error::UnknownCategory(_)
        | Error::Config(_) => StatusCode::BAD_REQUEST,
        Error::EmptyInput => StatusCode::UNPROCESSABLE_ENTITY,
        Error::Timeout { .. } => StatusCode::GATEWAY_TIMEOUT,
        Error::ProviderFailure { .. }
        | Error::AuthFailure(_)
        | Error::UnmatchedRequest(_)
        | Error::MalformedVerdict(_)
        | Error::ParseFailure(_) => StatusCode::BAD_GATEWAY,
        Error::InvalidTable(_) | Error::CorruptRecord { .. } | Error::Io(_) | Error::Json(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(json!({ "error": self.0.code(), "message": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::Io(std::io::Error::other(e.to_string())))),
    }
}

/// A finding plus its display color, computed server-side.
#[derive(Debug, Clone, Serialize)]
pub struct FindingView {
    #[serde(flatten)]
    pub finding: PrivacyFinding,
    pub color: ColorSpec,
    pub css: String,
}

impl From<PrivacyFinding> for FindingView {
    fn from(finding: PrivacyFinding) -> Self {
        let color = finding.color();
        Self { css: color.css(), color, finding }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FindingSetView {
    pub dialogue_id: DialogueId,
    pub inference_run_id: RunId,
    pub findings: Vec<FindingView>,
    pub inputs_used: usize,
    pub memories_used: usize,
    pub created_at: DateTime<Utc>,
}

impl From<FindingSet> for FindingSetView {
    fn from(s: FindingSet) -> Self {
        Self {
            dialogue_id: s.dialogue_id,
            inference_run_id: s.inference_run_id,
            findings: s.findings.into_iter().map(FindingView::from).collect(),
            inputs_used: s.inputs_used,
            memories_used: s.memories_used,
            created_at: s.created_at,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct NewDialogue {
    #[serde(default)]
    title: String,
}

async fn create_dialogue(State(st): State<AppState>, body: Option<Json<NewDialogue>>) -> ApiResult<Response> {
    let title = body.map(|Json(b)| b.title).unwrap_or_default();
    let id = blocking(move || st.engine.create_dialogue(&title)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

#[derive(Debug, Deserialize)]
struct NewMessage {
    text: String,
    #[serde(default)]
    strategy: Option<Strategy>,
}

async fn post_message(
    State(st): State<AppState>,
    Path(id): Path<DialogueId>,
    Json(body): Json<NewMessage>,
) -> ApiResult<Response> {
    let strategy = body.strategy.unwrap_or(st.default_strategy);
    let resp = blocking(move || st.engine.handle_user_message(&id, &body.text, strategy)).await?;
    Ok(Json(resp).into_response())
}

async fn get_findings(State(st): State<AppState>, Path(id): Path<DialogueId>) -> ApiResult<Response> {
    let poll = blocking(move || st.engine.findings(&id)).await?;
    Ok(match poll {
        FindingsPoll::Ready { set } => {
            let mut v = serde_json::to_value(FindingSetView::from(set)).map_err(Error::from)?;
            v["status"] = json!("ready");
            (StatusCode::OK, Json(v)).into_response()
        }
        FindingsPoll::Pending { run_id } => {
            (StatusCode::ACCEPTED, Json(json!({ "status": "pending", "run_id": run_id }))).into_response()
        }
        FindingsPoll::None => (StatusCode::OK, Json(json!({ "status": "none" }))).into_response(),
        FindingsPoll::Failed { run_id, error } => (
            StatusCode::BAD_GATEWAY,
            Json(json!({ "status": "failed", "run_id": run_id, "error": error })),
        )
            .into_response(),
    })
}

#[derive(Debug, Serialize)]
struct SourcesView {
    finding: FindingView,
    inputs: Vec<InputSource>,
    memories: Vec<MemorySource>,
}

impl From<FindingSources> for SourcesView {
    fn from(s: FindingSources) -> Self {
        Self { finding: s.finding.into(), inputs: s.inputs, memories: s.memories }
    }
}

async fn get_sources(State(st): State<AppState>, Path(fid): Path<FindingId>) -> ApiResult<Json<SourcesView>> {
    let s = blocking(move || st.engine.sources_of(&fid)).await?;
    Ok(Json(s.into()))
}

async fn resolve_finding(State(st): State<AppState>, Path(fid): Path<FindingId>) -> ApiResult<Json<FindingView>> {
    let f = blocking(move || st.engine.resolve_finding(&fid)).await?;
    Ok(Json(f.into()))
}

/// Batch body; the dialogue comes from the path and the id is optional.
#[derive(Debug, Deserialize)]
struct EditRequest {
    #[serde(default)]
    id: Option<BatchId>,
    #[serde(default)]
    dialogue_id: Option<DialogueId>,
    #[serde(default)]
    turn_edits: Vec<TurnEdit>,
    #[serde(default)]
    memory_edits: Vec<MemoryEdit>,
    #[serde(default)]
    memory_deletes: Vec<MemoryId>,
    #[serde(default)]
    submitted_at: Option<DateTime<Utc>>,
}

async fn post_edits(
    State(st): State<AppState>,
    Path(id): Path<DialogueId>,
    Json(body): Json<EditRequest>,
) -> ApiResult<Response> {
    if body.dialogue_id.as_ref().is_some_and(|d| d != &id) {
        return Err(Error::InvalidRequest("dialogue_id in body does not match the path".into()).into());
    }
    let report = blocking(move || {
        let batch = EditBatch {
            id: body.id.unwrap_or_else(|| st.engine.new_batch_id()),
            dialogue_id: id,
            turn_edits: body.turn_edits,
            memory_edits: body.memory_edits,
            memory_deletes: body.memory_deletes,
            submitted_at: body.submitted_at.unwrap_or_else(|| st.engine.now()),
        };
        st.engine.apply_edits(&batch)
    })
    .await?;
    let status = if report.accepted { StatusCode::OK } else { StatusCode::CONFLICT };
    Ok((status, Json(report)).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct MemoryQuery {
    #[serde(default)]
    include_deleted: bool,
}

async fn list_memories(State(st): State<AppState>, Query(q): Query<MemoryQuery>) -> ApiResult<Response> {
    let list = blocking(move || Ok(st.engine.list_memories(q.include_deleted))).await?;
    Ok(Json(list).into_response())
}

#[derive(Debug, Deserialize)]
struct MemoryPatch {
    text: String,
}

async fn patch_memory(
    State(st): State<AppState>,
    Path(mid): Path<MemoryId>,
    Json(body): Json<MemoryPatch>,
) -> ApiResult<Response> {
    let m = blocking(move || st.engine.update_memory(&mid, &body.text)).await?;
    Ok(Json(m).into_response())
}

async fn delete_memory(State(st): State<AppState>, Path(mid): Path<MemoryId>) -> ApiResult<Response> {
    let m = blocking(move || st.engine.delete_memory(&mid)).await?;
    Ok(Json(m).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct SummaryQuery {
    group_by: Option<String>,
    start: Option<DateTime<Utc>>,
    end: Option<DateTime<Utc>>,
}

async fn metrics_summary(State(st): State<AppState>, Query(q): Query<SummaryQuery>) -> ApiResult<Response> {
    let group_by: GroupBy = match q.group_by.as_deref() {
        Some(g) => g.parse().map_err(|_| Error::InvalidRequest(format!("unknown group_by {g:?}")))?,
        None => GroupBy::default(),
    };
    let window = Window { start: q.start, end: q.end };
    let s = blocking(move || Ok(st.engine.summarize(&window, group_by))).await?;
    Ok(Json(s).into_response())
}

async fn metrics_export(State(st): State<AppState>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let mut out = Vec::new();
        st.engine.export_metrics_csv(&mut out)?;
        Ok(out)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], bytes).into_response())
}

async fn post_metrics_event(State(st): State<AppState>, Json(ev): Json<ClientEvent>) -> ApiResult<Response> {
    let id = blocking(move || st.engine.record_client_event(ev)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
