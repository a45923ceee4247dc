//! HTTP service around the experiment runner.
//!
//! One run at a time. Synthetic-teacher runs go unattended; human-teacher
//! runs publish each session's queries under `/runs/{id}/pending` and
//! resume once every query of the session has a label.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prior_core::evaluation::{heatmap_csv, RecoveryReport};
use prior_core::reward_model::RewardNet;
use prior_core::teacher::{Choice, PreferenceDataset, Query, Trajectory};
use prior_core::trainer::{
    run_experiment_with, ExperimentConfig, LabelSource, RunHooks, RunObserver, RunPhase, SessionMetrics, TeacherKind,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Environment variable holding the bind address.
pub const BIND_ENV: &str = "PRIOR_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
/// Optional single origin allowed by CORS; any origin when unset.
pub const CORS_ENV: &str = "PRIOR_CORS_ORIGIN";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Collecting,
    AwaitingLabels,
    Training,
    FinishingPolicy,
    Done,
    Failed,
}

impl From<RunPhase> for RunStatus {
    fn from(p: RunPhase) -> Self {
        match p {
            RunPhase::Collecting => RunStatus::Collecting,
            RunPhase::AwaitingLabels => RunStatus::AwaitingLabels,
            RunPhase::Training => RunStatus::Training,
            RunPhase::FinishingPolicy => RunStatus::FinishingPolicy,
            RunPhase::Done => RunStatus::Done,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Pending,
    Answered,
    Expired,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PendingQuery {
    pub id: String,
    pub session: usize,
    pub tau0: Trajectory,
    pub tau1: Trajectory,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub status: QueryStatus,
}

struct RunState {
    id: String,
    status: RunStatus,
    session: usize,
    queries: Vec<PendingQuery>,
    /// Query id to its position in `queries`.
    index: HashMap<String, usize>,
    labels: Option<mpsc::Sender<(usize, Choice)>>,
    dataset_len: usize,
    metrics: Vec<SessionMetrics>,
    report: Option<RecoveryReport>,
    heatmap: String,
    error: Option<String>,
    output_dir: Option<PathBuf>,
}

impl RunState {
    fn active(&self) -> bool {
        !matches!(self.status, RunStatus::Done | RunStatus::Failed)
    }

    fn pending(&self) -> Vec<PendingQuery> {
        self.queries
            .iter()
            .filter(|q| q.session == self.session && q.status == QueryStatus::Pending)
            .cloned()
            .collect()
    }
}

#[derive(Default)]
struct Inner {
    runs: HashMap<String, RunState>,
    current: Option<String>,
    next_id: u64,
}

/// Shared server state; cheap to clone.
#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    runs_dir: Option<PathBuf>,
}

impl AppState {
    /// `runs_dir`, when given, receives each finished run's outputs under a
    /// subdirectory named after the run id.
    pub fn new(runs_dir: Option<PathBuf>) -> Self {
        Self {
            inner: Arc::default(),
            runs_dir,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn with_run<T>(&self, id: &str, f: impl FnOnce(&mut RunState) -> T) -> Option<T> {
        self.lock().runs.get_mut(id).map(f)
    }
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Publishes queries to the HTTP layer and blocks until the handlers have
/// forwarded a label for each of them.
struct HumanLabels {
    state: AppState,
    run_id: String,
    rx: mpsc::Receiver<(usize, Choice)>,
}

impl LabelSource for HumanLabels {
    fn label(&mut self, session: usize, queries: &[Query]) -> prior_core::Result<Vec<(usize, Choice)>> {
        self.state.with_run(&self.run_id, |run| {
            let created_at = now_millis();
            run.session = session;
            for (i, q) in queries.iter().enumerate() {
                let id = format!("{}-s{session}-q{i}", run.id);
                run.index.insert(id.clone(), run.queries.len());
                run.queries.push(PendingQuery {
                    id,
                    session,
                    tau0: q.tau0.clone(),
                    tau1: q.tau1.clone(),
                    created_at,
                    status: QueryStatus::Pending,
                });
            }
            run.status = RunStatus::AwaitingLabels;
        });
        let mut out = Vec::with_capacity(queries.len());
        while out.len() < queries.len() {
            match self.rx.recv() {
                Ok(label) => out.push(label),
                Err(_) => return Err(prior_core::Error::LabelSourceClosed),
            }
        }
        Ok(out)
    }
}

struct Publisher {
    state: AppState,
    run_id: String,
}

impl RunObserver for Publisher {
    fn started(&mut self, net: &RewardNet) {
        let csv = heatmap_csv(&net.reward_table());
        self.state.with_run(&self.run_id, |run| run.heatmap = csv);
    }

    fn phase(&mut self, session: usize, phase: RunPhase) {
        self.state.with_run(&self.run_id, |run| {
            run.session = session;
            // The label source flips to awaiting itself once queries exist;
            // in synthetic mode the label step is instantaneous.
            if phase != RunPhase::AwaitingLabels {
                run.status = phase.into();
            }
        });
    }

    fn session_finished(&mut self, metrics: &SessionMetrics, net: &RewardNet, dataset: &PreferenceDataset) {
        let csv = heatmap_csv(&net.reward_table());
        let m = metrics.clone();
        let len = dataset.len();
        self.state.with_run(&self.run_id, |run| {
            run.heatmap = csv;
            run.metrics.push(m);
            run.dataset_len = len;
        });
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{message}")]
    BadRequest { field: Option<String>, message: String },
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, body) = match &self {
            ApiError::BadRequest { field, message } => {
                (StatusCode::BAD_REQUEST, json!({ "error": message, "field": field }))
            }
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, json!({ "error": m })),
        };
        (code, Json(body)).into_response()
    }
}

fn bad_config(e: prior_core::Error) -> ApiError {
    match e {
        prior_core::Error::Config { field, message } => ApiError::BadRequest {
            field: Some(field.to_string()),
            message: format!("{field}: {message}"),
        },
        other => ApiError::BadRequest {
            field: None,
            message: other.to_string(),
        },
    }
}

async fn create_run(State(state): State<AppState>, Json(body): Json<Value>) -> Result<Response, ApiError> {
    let cfg: ExperimentConfig = serde_json::from_value(body).map_err(|e| ApiError::BadRequest {
        field: None,
        message: e.to_string(),
    })?;
    cfg.validate().map_err(bad_config)?;

    let (id, rx) = {
        let mut inner = state.lock();
        if let Some(cur) = inner.current.as_ref().and_then(|c| inner.runs.get(c)) {
            if cur.active() {
                return Err(ApiError::Conflict(format!("run {} is still active", cur.id)));
            }
        }
        inner.next_id += 1;
        let id = format!("run-{}", inner.next_id);
        let (tx, rx) = mpsc::channel();
        let human = cfg.teacher == TeacherKind::Human;
        inner.runs.insert(
            id.clone(),
            RunState {
                id: id.clone(),
                status: RunStatus::Collecting,
                session: 0,
                queries: Vec::new(),
                index: HashMap::new(),
                labels: human.then_some(tx),
                dataset_len: 0,
                metrics: Vec::new(),
                report: None,
                heatmap: String::new(),
                error: None,
                output_dir: state.runs_dir.as_ref().map(|d| d.join(&id)),
            },
        );
        inner.current = Some(id.clone());
        (id, rx)
    };

    let worker_state = state.clone();
    let run_id = id.clone();
    std::thread::spawn(move || {
        let mut labels = HumanLabels {
            state: worker_state.clone(),
            run_id: run_id.clone(),
            rx,
        };
        let mut publisher = Publisher {
            state: worker_state.clone(),
            run_id: run_id.clone(),
        };
        let human = cfg.teacher == TeacherKind::Human;
        let hooks = RunHooks {
            labels: if human { Some(&mut labels) } else { None },
            observer: Some(&mut publisher),
        };
        let result = run_experiment_with(&cfg, hooks);
        let out_dir = worker_state.with_run(&run_id, |r| r.output_dir.clone()).flatten();
        let written = match (&result, out_dir) {
            (Ok(art), Some(dir)) => art.write_to(&dir).err(),
            _ => None,
        };
        worker_state.with_run(&run_id, |run| {
            run.labels = None;
            match result {
                Ok(art) => {
                    run.heatmap = art.heatmap_csv();
                    run.dataset_len = art.dataset.len();
                    run.report = Some(art.report);
                    run.status = RunStatus::Done;
                    if let Some(e) = written {
                        log::error!("writing outputs of {run_id} failed: {e}");
                        run.error = Some(e.to_string());
                    }
                }
                Err(e) => {
                    log::error!("run {run_id} failed: {e}");
                    run.error = Some(e.to_string());
                    run.status = RunStatus::Failed;
                }
            }
        });
    });

    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

async fn pending(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Vec<PendingQuery>>, ApiError> {
    state
        .with_run(&id, |run| Json(run.pending()))
        .ok_or_else(|| ApiError::NotFound(format!("unknown run {id}")))
}

#[derive(Debug, Deserialize)]
struct LabelBody {
    query_id: String,
    choice: Value,
}

fn parse_choice(v: &Value) -> Option<Choice> {
    match v {
        Value::Number(n) if n.as_u64() == Some(0) => Some(Choice::First),
        Value::Number(n) if n.as_u64() == Some(1) => Some(Choice::Second),
        Value::String(s) => match s.as_str() {
            "0" => Some(Choice::First),
            "1" => Some(Choice::Second),
            "tie" => Some(Choice::Tie),
            _ => None,
        },
        _ => None,
    }
}

async fn submit_label(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<Value>,
) -> Result<Json<Value>, ApiError> {
    let body: LabelBody = serde_json::from_value(body).map_err(|e| ApiError::BadRequest {
        field: None,
        message: e.to_string(),
    })?;
    let choice = parse_choice(&body.choice).ok_or_else(|| ApiError::BadRequest {
        field: Some("choice".into()),
        message: "choice must be 0, 1 or \"tie\"".into(),
    })?;
    let mut inner = state.lock();
    let run = inner
        .runs
        .get_mut(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown run {id}")))?;
    let &slot = run
        .index
        .get(&body.query_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown query {}", body.query_id)))?;
    let q = &mut run.queries[slot];
    if q.status != QueryStatus::Pending {
        return Err(ApiError::Conflict(format!("query {} was already answered", q.id)));
    }
    let session = q.session;
    let first = run.queries.iter().position(|q| q.session == session).unwrap_or(slot);
    let tx = run
        .labels
        .as_ref()
        .ok_or_else(|| ApiError::Conflict("run is not accepting labels".into()))?;
    tx.send((slot - first, choice))
        .map_err(|_| ApiError::Conflict("run is not accepting labels".into()))?;
    run.queries[slot].status = QueryStatus::Answered;
    run.dataset_len += 1;
    let remaining = run.pending().len();
    if remaining == 0 {
        run.status = RunStatus::Training;
    }
    Ok(Json(json!({
        "query_id": body.query_id,
        "dataset_len": run.dataset_len,
        "remaining": remaining,
    })))
}

async fn metrics(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    state
        .with_run(&id, |run| {
            Json(json!({
                "id": run.id,
                "status": run.status,
                "session": run.session,
                "sessions_completed": run.metrics.len(),
                "dataset_len": run.dataset_len,
                "sessions": run.metrics,
                "report": run.report,
                "error": run.error,
            }))
        })
        .ok_or_else(|| ApiError::NotFound(format!("unknown run {id}")))
}

async fn heatmap(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let csv = state
        .with_run(&id, |run| run.heatmap.clone())
        .ok_or_else(|| ApiError::NotFound(format!("unknown run {id}")))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

fn cors() -> CorsLayer {
    let origin = std::env::var(CORS_ENV)
        .ok()
        .and_then(|o| HeaderValue::from_str(&o).ok())
        .map(AllowOrigin::exact)
        .unwrap_or_else(AllowOrigin::any);
    CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(tower_http::cors::Any)
        .allow_headers(tower_http::cors::Any)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", post(create_run))
        .route("/runs/{id}/pending", get(pending))
        .route("/runs/{id}/labels", post(submit_label))
        .route("/runs/{id}/metrics", get(metrics))
        .route("/runs/{id}/heatmap", get(heatmap))
        .layer(cors())
        .with_state(state)
}

/// Serves on `addr`, or on `$PRIOR_BIND` / [`DEFAULT_BIND`] when `None`.
pub async fn serve(addr: Option<String>, runs_dir: Option<PathBuf>) -> std::io::Result<()> {
    let addr = addr
        .or_else(|| std::env::var(BIND_ENV).ok())
        .unwrap_or_else(|| DEFAULT_BIND.to_string());
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(runs_dir))).await
}
