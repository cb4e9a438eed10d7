//! HTTP facade over one project directory, used during the collective
//! conflict-resolution session.
//!
//! Reads run concurrently against the last committed state. Every write is
//! applied to a copy of the project, saved to disk and only then published,
//! so a successful response is always durable.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crossanno::merge::{Conflict, ConflictStatus, Resolution};
use crossanno::model::{char_slice, Span};
use crossanno::{Error, ErrorKind, Project, ProjectStore, Stage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

/// Characters of document text shown on each side of a variant.
pub const CONTEXT_CHARS: usize = 120;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot load project: {0}")]
    ProjectLoad(#[source] Error),
    #[error("address {addr} is in use")]
    AddressInUse { addr: SocketAddr },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

pub struct AppState {
    store: ProjectStore,
    project: RwLock<Project>,
}

impl AppState {
    pub fn load(dir: impl Into<PathBuf>) -> Result<Arc<Self>, Error> {
        let store = ProjectStore::new(dir);
        let project = store.load()?;
        Ok(Arc::new(Self {
            store,
            project: RwLock::new(project),
        }))
    }

    pub fn root(&self) -> &Path {
        self.store.root()
    }

    /// Apply `f` to a copy of the project, persist it, then publish it.
    async fn write<T>(&self, f: impl FnOnce(&mut Project) -> Result<T, Error>) -> Result<T, Error> {
        let mut guard = self.project.write().await;
        let mut next = guard.clone();
        let out = f(&mut next)?;
        self.store.save(&next)?;
        *guard = next;
        Ok(out)
    }
}

/// Structured error body: `{code, message, detail}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    detail: Value,
}

impl ApiError {
    fn bad_request(code: &str, message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: code.into(),
            message,
            detail: Value::Null,
        }
    }

    fn not_found(code: &str, message: String, detail: Value) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: code.into(),
            message,
            detail,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match (&e, e.kind()) {
            (Error::UnknownConflict(_) | Error::UnknownIteration(_) | Error::UnknownDoc(_), _) => StatusCode::NOT_FOUND,
            (_, ErrorKind::Validation) => StatusCode::BAD_REQUEST,
            (_, ErrorKind::State) => StatusCode::CONFLICT,
            (_, ErrorKind::Io) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let detail = match &e {
            Error::UnresolvedConflict(ids) => json!({ "conflict_ids": ids }),
            Error::UnknownConflict(id) => json!({ "conflict_id": id }),
            Error::UnknownIteration(k) => json!({ "iteration": k }),
            Error::UnknownDoc(id) => json!({ "doc_id": id }),
            Error::OverlapAfterResolution { first, second } => json!({ "first": first, "second": second }),
            Error::WrongStage { index, actual, expected } => {
                json!({ "iteration": index, "stage": actual, "expected": expected })
            }
            _ => Value::Null,
        };
        Self {
            status,
            code: e.code().to_string(),
            message: e.to_string(),
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextWindow {
    pub before: String,
    pub text: String,
    pub after: String,
    /// Offset of the first character of `before` in the document.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantView {
    pub index: usize,
    #[serde(flatten)]
    pub span: Span,
    pub window: TextWindow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictView {
    pub conflict_id: String,
    pub doc_id: String,
    pub status: ConflictStatus,
    pub variants: Vec<VariantView>,
    pub resolution: Option<Resolution>,
}

pub fn window(text: &str, start: usize, end: usize) -> TextWindow {
    let from = start.saturating_sub(CONTEXT_CHARS);
    TextWindow {
        before: char_slice(text, from, start).to_string(),
        text: char_slice(text, start, end).to_string(),
        after: char_slice(text, end, end + CONTEXT_CHARS).to_string(),
        offset: from,
    }
}

fn conflict_view(p: &Project, index: usize, c: &Conflict) -> Result<ConflictView, Error> {
    let text = p.document(&c.doc_id).map_or("", |d| d.text());
    Ok(ConflictView {
        conflict_id: c.conflict_id.clone(),
        doc_id: c.doc_id.clone(),
        status: c.status,
        variants: c
            .variants
            .iter()
            .enumerate()
            .map(|(i, v)| VariantView {
                index: i,
                span: v.clone(),
                window: window(text, v.start(), v.end()),
            })
            .collect(),
        resolution: p.effective_resolutions(index)?.remove(&c.conflict_id),
    })
}

fn iteration_summary(p: &Project, index: usize) -> Result<Value, Error> {
    let it = p.iteration(index)?;
    let conflicts = p.conflicts(index)?;
    let open = conflicts.iter().filter(|c| c.status == ConflictStatus::Open).count();
    Ok(json!({
        "index": it.index,
        "stage": it.stage,
        "scheme_version": it.scheme_version,
        "doc_ids": it.doc_ids,
        "sampling": it.sampling,
        "assignments": it.assignments,
        "missing_uploads": p.missing_copies(index)?.len(),
        "conflicts": { "total": conflicts.len(), "open": open, "resolved": conflicts.len() - open },
        "gold_docs": p.gold(index)?.len(),
    }))
}

async fn project_summary(State(state): State<Arc<AppState>>) -> ApiResult<Value> {
    let p = state.project.read().await;
    let iterations: Vec<Value> = p
        .iterations()
        .iter()
        .map(|it| json!({ "index": it.index, "stage": it.stage, "docs": it.doc_ids.len() }))
        .collect();
    Ok(Json(json!({
        "name": p.name(),
        "annotators": p.annotators(),
        "scheme": p.scheme(),
        "scheme_versions": p.scheme_history().iter().map(|s| s.version()).collect::<Vec<_>>(),
        "documents": p.corpus().len(),
        "labeled": p.labeled_pool().len(),
        "unlabeled": p.unlabeled_pool().len(),
        "iterations": iterations,
        "active_iteration": p.current_iteration().filter(|it| it.stage != Stage::Finalized).map(|it| it.index),
        "split": p.splits().is_some(),
    })))
}

async fn iteration(State(state): State<Arc<AppState>>, UrlPath(k): UrlPath<usize>) -> ApiResult<Value> {
    let p = state.project.read().await;
    Ok(Json(iteration_summary(&p, k)?))
}

#[derive(Debug, Deserialize)]
struct ConflictQuery {
    status: Option<String>,
}

async fn conflicts(
    State(state): State<Arc<AppState>>,
    UrlPath(k): UrlPath<usize>,
    Query(q): Query<ConflictQuery>,
) -> ApiResult<Value> {
    let wanted = match q.status.as_deref().unwrap_or("all") {
        "all" => None,
        "open" => Some(ConflictStatus::Open),
        "resolved" => Some(ConflictStatus::Resolved),
        other => {
            return Err(ApiError::bad_request(
                "invalid_query",
                format!("status must be open, resolved or all, not {other:?}"),
            ))
        }
    };
    let p = state.project.read().await;
    let all = p.conflicts(k)?;
    let views = all
        .iter()
        .filter(|c| wanted.is_none_or(|s| c.status == s))
        .map(|c| conflict_view(&p, k, c))
        .collect::<Result<Vec<_>, _>>()?;
    let open = all.iter().filter(|c| c.status == ConflictStatus::Open).count();
    Ok(Json(json!({
        "iteration": k,
        "stage": p.iteration(k)?.stage,
        "total": all.len(),
        "open": open,
        "conflicts": views,
    })))
}

async fn document(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Value> {
    let p = state.project.read().await;
    let doc = p
        .document(&id)
        .ok_or_else(|| ApiError::not_found("unknown_doc", format!("unknown document {id}"), json!({ "doc_id": id })))?;
    let gold = p
        .iterations()
        .iter()
        .filter_map(|it| p.gold(it.index).ok())
        .flatten()
        .find(|g| g.doc_id() == id)
        .map(|g| g.spans().to_vec());
    Ok(Json(json!({
        "id": doc.id(),
        "text": doc.text(),
        "meta": doc.meta(),
        "char_len": doc.char_len(),
        "merged": p.merged_for(&id).map(|m| m.spans().to_vec()),
        "gold": gold,
    })))
}

async fn record_resolution(
    State(state): State<Arc<AppState>>,
    UrlPath(k): UrlPath<usize>,
    body: Result<Json<Resolution>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<ConflictView> {
    let Json(resolution) = body.map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
    let view = state
        .write(|p| {
            let conflict = p.record_resolution(k, resolution)?.clone();
            conflict_view(p, k, &conflict)
        })
        .await?;
    Ok(Json(view))
}

async fn finalize(State(state): State<Arc<AppState>>, UrlPath(k): UrlPath<usize>) -> ApiResult<Value> {
    let summary = state
        .write(|p| {
            p.finalize_iteration(k, Vec::new())?;
            iteration_summary(p, k)
        })
        .await?;
    Ok(Json(summary))
}

const PLACEHOLDER: &str = r#"<!doctype html>
<html lang="en">
<head><meta charset="utf-8"><title>crossanno</title></head>
<body>
<h1>crossanno review session</h1>
<p>The review UI is not built. The JSON API is available:</p>
<ul>
<li><a href="/api/project">GET /api/project</a></li>
<li>GET /api/iterations/{k}</li>
<li>GET /api/iterations/{k}/conflicts?status=open|resolved|all</li>
<li>GET /api/docs/{id}</li>
<li>POST /api/iterations/{k}/resolutions</li>
<li>POST /api/iterations/{k}/finalize</li>
</ul>
</body>
</html>
"#;

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER)
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("not_found", "no such endpoint".into(), Value::Null)
}

/// Routes for the API; `/` serves `ui_dir` when given, a placeholder page otherwise.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/project", get(project_summary))
        .route("/iterations/{k}", get(iteration))
        .route("/iterations/{k}/conflicts", get(conflicts))
        .route("/iterations/{k}/resolutions", post(record_resolution))
        .route("/iterations/{k}/finalize", post(finalize))
        .route("/docs/{id}", get(document))
        .fallback(api_not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app.route("/", get(placeholder)),
    }
}

/// Serve until Ctrl-C. `on_ready` receives the bound address, which differs
/// from `addr` when port 0 was requested.
pub async fn serve(
    project_dir: &Path,
    addr: SocketAddr,
    ui_dir: Option<&Path>,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), ServeError> {
    let state = AppState::load(project_dir).map_err(ServeError::ProjectLoad)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| {
        if source.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::AddressInUse { addr }
        } else {
            ServeError::Bind { addr, source }
        }
    })?;
    on_ready(listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// [`serve`] on a fresh multi-threaded runtime.
pub fn run(
    project_dir: &Path,
    addr: SocketAddr,
    ui_dir: Option<&Path>,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), ServeError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(project_dir, addr, ui_dir, on_ready))
}
