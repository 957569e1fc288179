//! Local HTTP service for review sessions.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | create a session from named tile pools |
//! | GET | `/sessions/{id}/next` | current blinded item or completion |
//! | POST | `/sessions/{id}/labels` | `{item_id, label}` |
//! | GET | `/sessions/{id}/report` | JSON, or CSV with `?format=csv`; 403 until complete |
//! | GET | `/items/{id}/image` | PNG bytes |
//! | GET | `/ui/…` | static review bundle, when configured |

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use super::{
    build_session, read_log, replay_log, session_report, NextItem, SessionState, Sidedness, TuringError, TuringSession,
    Verdict,
};
use crate::dataset::ImageTile;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Named tile pools sessions draw from, e.g. `real` and `fake`.
    pub pools: HashMap<String, Vec<ImageTile>>,
    /// Directory of per-session label logs; sessions found there are
    /// resumed at start-up.
    pub log_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub null_accuracy: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { pools: HashMap::new(), log_dir: None, ui_dir: None, null_accuracy: 0.5 }
    }
}

type SessionHandle = Arc<Mutex<TuringSession>>;

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, SessionHandle>>,
    /// Item id → session id.
    items: RwLock<HashMap<String, String>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Self, TuringError> {
        if !(config.null_accuracy > 0.0 && config.null_accuracy < 1.0) {
            return Err(TuringError::DegenerateNull(config.null_accuracy));
        }
        let state = AppState(Arc::new(Inner {
            config,
            sessions: RwLock::new(HashMap::new()),
            items: RwLock::new(HashMap::new()),
        }));
        state.resume()?;
        Ok(state)
    }

    fn resume(&self) -> Result<(), TuringError> {
        let Some(dir) = &self.0.config.log_dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        let tiles: HashMap<&str, &ImageTile> = self.0.config.pools.values().flatten().map(|t| (t.id(), t)).collect();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let mut session = replay_log(&read_log(&path)?)?;
            let missing = session.attach_images(&tiles)?;
            if missing > 0 {
                log::warn!("session `{}`: {missing} items have no image in the configured pools", session.id);
            }
            log::info!("resumed session `{}` at {}/{}", session.id, session.records().len(), session.total());
            self.insert(session);
        }
        Ok(())
    }

    fn insert(&self, session: TuringSession) -> SessionHandle {
        let id = session.id.clone();
        {
            let mut items = self.0.items.write().expect("item index lock");
            for it in session.items() {
                items.insert(it.item_id.clone(), id.clone());
            }
        }
        let handle = Arc::new(Mutex::new(session));
        self.0.sessions.write().expect("session map lock").insert(id, handle.clone());
        handle
    }

    fn session(&self, id: &str) -> Result<SessionHandle, TuringError> {
        self.0
            .sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| TuringError::UnknownSession(id.into()))
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.0.config.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }
}

pub struct ApiError(TuringError);

impl From<TuringError> for ApiError {
    fn from(e: TuringError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(TuringError::InvalidInput(e.body_text()))
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use TuringError as E;
        let (status, code) = match &self.0 {
            E::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            E::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            E::DuplicateLabel(_) => (StatusCode::CONFLICT, "duplicate_label"),
            E::NotServed(_) => (StatusCode::CONFLICT, "not_served"),
            E::Incomplete(_) => (StatusCode::FORBIDDEN, "incomplete"),
            E::InsufficientPool { .. } | E::MixedClasses(_) | E::DegenerateNull(_) | E::InvalidInput(_) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        (status, Json(ErrorBody { error: code, message: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn default_n_each() -> usize {
    100
}

fn default_real() -> String {
    "real".into()
}

fn default_fake() -> String {
    "fake".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub reviewer_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_each")]
    pub n_each: usize,
    #[serde(default = "default_real")]
    pub real_pool: String,
    #[serde(default = "default_fake")]
    pub fake_pool: String,
}

#[derive(Serialize)]
struct SessionSummary {
    session_id: String,
    reviewer_id: String,
    n_each: usize,
    total: usize,
    labelled: usize,
    state: SessionState,
}

fn summary(s: &TuringSession) -> SessionSummary {
    SessionSummary {
        session_id: s.id.clone(),
        reviewer_id: s.reviewer_id.clone(),
        n_each: s.n_each,
        total: s.total(),
        labelled: s.records().len(),
        state: s.state(),
    }
}

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionSummary>)> {
    let Json(req) = body?;
    if req.reviewer_id.trim().is_empty() {
        return Err(TuringError::InvalidInput("reviewer_id must not be empty".into()).into());
    }
    let pool = |name: &str| {
        app.0.config.pools.get(name).ok_or_else(|| TuringError::InvalidInput(format!("unknown tile pool `{name}`")))
    };
    let session = build_session(pool(&req.real_pool)?, pool(&req.fake_pool)?, req.n_each, req.seed, &req.reviewer_id)?;
    if let Ok(existing) = app.session(&session.id) {
        let s = existing.lock().expect("session lock");
        return Ok((StatusCode::OK, Json(summary(&s))));
    }
    if let Some(path) = app.log_path(&session.id) {
        session.created_event().append_to(&path)?;
    }
    let out = summary(&session);
    app.insert(session);
    Ok((StatusCode::CREATED, Json(out)))
}

async fn next_item(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<NextItem>> {
    let handle = app.session(&id)?;
    let mut s = handle.lock().expect("session lock");
    Ok(Json(s.next_item(chrono::Utc::now())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub item_id: String,
    pub label: String,
}

#[derive(Serialize)]
struct LabelAck {
    item_id: String,
    accepted: bool,
    labelled: usize,
    total: usize,
    state: SessionState,
}

async fn post_label(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<Json<LabelAck>> {
    let Json(req) = body?;
    let label: Verdict = req.label.parse()?;
    let handle = app.session(&id)?;
    let mut s = handle.lock().expect("session lock");
    let rec = s.record_label(&req.item_id, label, chrono::Utc::now())?;
    if let Some(path) = app.log_path(&id) {
        super::LogEvent::Label(rec).append_to(&path)?;
    }
    Ok(Json(LabelAck {
        item_id: req.item_id,
        accepted: true,
        labelled: s.records().len(),
        total: s.total(),
        state: s.state(),
    }))
}

#[derive(Deserialize)]
pub struct ReportQuery {
    pub format: Option<String>,
    #[serde(default)]
    pub sidedness: Sidedness,
}

async fn get_report(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let handle = app.session(&id)?;
    let report = {
        let s = handle.lock().expect("session lock");
        session_report(&s, app.0.config.null_accuracy, q.sidedness)?
    };
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some("csv") => Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], report.to_csv()?).into_response()),
        Some(other) => Err(TuringError::InvalidInput(format!("unknown report format `{other}`")).into()),
    }
}

async fn item_image(State(app): State<AppState>, Path(item_id): Path<String>) -> ApiResult<Response> {
    let session_id = app
        .0
        .items
        .read()
        .expect("item index lock")
        .get(&item_id)
        .cloned()
        .ok_or_else(|| TuringError::UnknownItem(item_id.clone()))?;
    let handle = app.session(&session_id)?;
    let bytes = handle.lock().expect("session lock").image(&item_id).ok_or(TuringError::UnknownItem(item_id))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes.as_ref().clone()).into_response())
}

async fn no_ui() -> ApiError {
    ApiError(TuringError::UnknownItem("no review bundle is configured under /ui/".into()))
}

pub fn router(app: AppState) -> Router {
    let ui_dir = app.0.config.ui_dir.clone();
    let r = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/labels", post(post_label))
        .route("/sessions/{id}/report", get(get_report))
        .route("/items/{id}/image", get(item_image));
    let r = match ui_dir {
        Some(dir) => r.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => r.route("/ui", get(no_ui)).route("/ui/{*rest}", get(no_ui)),
    };
    r.with_state(app)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> Result<(), TuringError> {
    let app = router(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
