//! HTTP+JSON front end for [`WorkflowService`], plus read-only corpus access
//! and the static review UI under `/ui/`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use fmea_core::workflow::{CreateRequest, FinalizeRequest, GenerateRequest, ReviewRequest, WorkflowError};
use fmea_core::{DocId, Provenance, StepKind, WorkflowService};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn status(&self) -> StatusCode {
        status_for(&self.code)
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "NOT_FOUND" => StatusCode::NOT_FOUND,
        "EMPTY_INPUT" | "INVALID_ARGUMENT" | "INVALID_K" | "INVALID_JSON" => StatusCode::BAD_REQUEST,
        "STEP_LOCKED" | "STEP_REVIEWED" | "INVALID_STATE" | "STEP_NOT_GENERATED" | "STEP_NOT_REVIEWED"
        | "ALREADY_FINALIZED" | "DUPLICATE_ID" => StatusCode::CONFLICT,
        "UNKNOWN_EXAMPLE" | "UNKNOWN_PROVIDER" | "INVALID_REVIEW" | "INVALID_DOCUMENT" | "MISSING_STEP_DATA" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        "GENERATION_FAILED" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        ApiError {
            code: e.code.to_string(),
            message: e.message,
            detail: e.detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone)]
struct AppState {
    service: Arc<WorkflowService>,
}

/// Build the router. `ui_dir`, when given, is served at `/ui/`.
pub fn router(service: Arc<WorkflowService>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/steps/{step}/candidates", get(get_candidates))
        .route("/sessions/{id}/steps/{step}/shots", put(confirm_shots))
        .route("/sessions/{id}/steps/{step}/generate", post(generate))
        .route("/sessions/{id}/steps/{step}/review", post(review))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/documents", get(list_documents))
        .route("/documents/{id}", get(get_document))
        .fallback(|| async { ApiError::new("NOT_FOUND", "no such route") })
        .with_state(AppState { service });
    match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Serve `router` until the process is stopped.
pub async fn serve(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router).await
}

/// Parse a JSON body; an empty body means the default value.
fn body<T: DeserializeOwned + Default>(bytes: &Bytes) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::new("INVALID_JSON", e.to_string()))
}

fn step(s: &str) -> Result<StepKind, ApiError> {
    s.parse()
        .map_err(|_| ApiError::new("NOT_FOUND", format!("unknown step `{s}`")).with_step_list())
}

impl ApiError {
    fn with_step_list(mut self) -> Self {
        self.detail = json!({ "steps": StepKind::ALL.iter().map(|s| s.as_str()).collect::<Vec<_>>() });
        self
    }
}

/// Run blocking service work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, WorkflowError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new("INTERNAL", e.to_string())),
    }
}

async fn create_session(State(st): State<AppState>, bytes: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let req: CreateRequest = body(&bytes)?;
    let session = blocking(move || st.service.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(session_json(&session))))
}

fn session_json(s: &fmea_core::Session) -> Value {
    serde_json::to_value(s).expect("sessions serialize")
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let s = blocking(move || st.service.get_session(&id)).await?;
    Ok(Json(session_json(&s)))
}

#[derive(Deserialize)]
struct CandidateQuery {
    k: Option<String>,
}

async fn get_candidates(
    State(st): State<AppState>,
    Path((id, s)): Path<(String, String)>,
    Query(q): Query<CandidateQuery>,
) -> ApiResult<Value> {
    let step = step(&s)?;
    let k = match q.k {
        None => None,
        Some(k) => Some(
            k.parse::<usize>()
                .map_err(|_| ApiError::new("INVALID_ARGUMENT", format!("k must be a positive integer, got `{k}`")))?,
        ),
    };
    let candidates = blocking(move || st.service.get_candidates(&id, step, k)).await?;
    Ok(Json(json!({ "step": step, "candidates": candidates })))
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShotsRequest {
    doc_ids: Vec<DocId>,
}

async fn confirm_shots(State(st): State<AppState>, Path((id, s)): Path<(String, String)>, bytes: Bytes) -> ApiResult<Value> {
    let step = step(&s)?;
    let req: ShotsRequest = body(&bytes)?;
    let s = blocking(move || st.service.confirm_shots(&id, step, req.doc_ids)).await?;
    Ok(Json(session_json(&s)))
}

async fn generate(State(st): State<AppState>, Path((id, s)): Path<(String, String)>, bytes: Bytes) -> ApiResult<Value> {
    let step = step(&s)?;
    let req: GenerateRequest = body(&bytes)?;
    let s = blocking(move || st.service.generate(&id, step, req)).await?;
    Ok(Json(session_json(&s)))
}

async fn review(State(st): State<AppState>, Path((id, s)): Path<(String, String)>, bytes: Bytes) -> ApiResult<Value> {
    let step = step(&s)?;
    let req: ReviewRequest = body(&bytes)?;
    let s = blocking(move || st.service.review(&id, step, req)).await?;
    Ok(Json(session_json(&s)))
}

async fn finalize(State(st): State<AppState>, Path(id): Path<String>, bytes: Bytes) -> ApiResult<Value> {
    let req: FinalizeRequest = body(&bytes)?;
    let doc = blocking(move || st.service.finalize(&id, req)).await?;
    Ok(Json(json!({ "doc_id": doc.doc_id, "document": doc })))
}

#[derive(Deserialize)]
struct DocumentQuery {
    provenance: Option<String>,
}

#[derive(Serialize)]
struct DocumentSummary {
    doc_id: DocId,
    equipment_name: String,
    short_description: String,
    provenance: Provenance,
}

async fn list_documents(State(st): State<AppState>, Query(q): Query<DocumentQuery>) -> ApiResult<Value> {
    let store = st.service.retriever().store().clone();
    let filter = match q.provenance {
        Some(p) => {
            let p: Provenance = serde_json::from_value(Value::String(p.clone()))
                .map_err(|_| ApiError::new("INVALID_ARGUMENT", format!("unknown provenance `{p}`")))?;
            fmea_core::store::ListFilter::Provenance(p)
        }
        None => fmea_core::store::ListFilter::All,
    };
    let docs: Vec<DocumentSummary> = store
        .list(filter)
        .iter()
        .filter_map(|id| store.get(id).ok())
        .map(|d| DocumentSummary {
            doc_id: d.doc_id,
            equipment_name: d.equipment_name,
            short_description: d.short_description,
            provenance: d.provenance,
        })
        .collect();
    Ok(Json(json!({ "documents": docs })))
}

async fn get_document(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    match st.service.retriever().store().get(&DocId::new(id)) {
        Ok(doc) => Json(doc).into_response(),
        Err(e) => ApiError::from(WorkflowError::from(e)).into_response(),
    }
}
