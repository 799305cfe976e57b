//! Local HTTP and WebSocket service: corpus editing, learn jobs, grid
//! queries and a server-side teleoperation loop through the safety filter.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::demonstrations::{DemoCorpus, DemoPoint, DemoSource, Demonstration, Outcome};
use crate::dynamics::{DynamicsKind, DynamicsModel};
use crate::error::{Error, Result};
use crate::evaluation::{grid_eval, level_set, GridField, Polyline, DEFAULT_RESOLUTION};
use crate::filter::{filter, FilterConfig};
use crate::io::ModelFileV1;
use crate::learner::{learn, LearnConfig, LearnReport};
use crate::qp::SolverStatus;
use crate::rbf::SafetyModel;
use crate::simgen::Scenario;

pub const DEFAULT_PORT: u16 = 7878;
pub const TELEOP_PROTOCOL: &str = "safeshield-teleop-v1";
pub const MAX_GRID_RESOLUTION: usize = 1000;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub scenario: Scenario,
    /// Teleop ticks per second.
    pub tick_hz: f64,
    /// Simulated time advanced per tick.
    pub teleop_dt: f64,
    pub filter: FilterConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            tick_hz: 50.0,
            teleop_dt: 0.02,
            filter: FilterConfig::default(),
        }
    }
}

/// A learned model as served, never mutated after publication.
#[derive(Debug)]
pub struct ModelSlot {
    pub version: u64,
    pub file: ModelFileV1,
    pub model: SafetyModel,
    pub dynamics: DynamicsModel,
    /// Corpus revision the model was learned from.
    pub corpus_revision: u64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done { report: LearnReport, model_version: u64 },
    Failed { error: String, report: Option<LearnReport> },
}

struct CorpusState {
    corpus: DemoCorpus,
    revision: u64,
    next_id: u64,
}

#[derive(Default)]
struct Jobs {
    running: Option<u64>,
    next: u64,
    status: HashMap<u64, JobStatus>,
}

pub struct AppState {
    config: ServiceConfig,
    corpus: Mutex<CorpusState>,
    model: RwLock<Option<Arc<ModelSlot>>>,
    model_versions: AtomicU64,
    jobs: Mutex<Jobs>,
}

impl AppState {
    pub fn new(config: ServiceConfig, corpus: DemoCorpus) -> Self {
        Self {
            config,
            corpus: Mutex::new(CorpusState {
                corpus,
                revision: 0,
                next_id: 0,
            }),
            model: RwLock::new(None),
            model_versions: AtomicU64::new(0),
            jobs: Mutex::new(Jobs::default()),
        }
    }

    /// Publishes a model; subsequent readers see it in full or not at all.
    pub fn install_model(&self, file: ModelFileV1, corpus_revision: u64) -> Result<u64> {
        let model = file.model()?;
        let dynamics = DynamicsModel::new(file.dynamics);
        if model.dim() != dynamics.state_dim() {
            return Err(Error::Dimension {
                expected: dynamics.state_dim(),
                got: model.dim(),
            });
        }
        let version = self.model_versions.fetch_add(1, Ordering::SeqCst) + 1;
        let slot = Arc::new(ModelSlot {
            version,
            file,
            model,
            dynamics,
            corpus_revision,
        });
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Some(slot);
        Ok(version)
    }

    pub fn model(&self) -> Option<Arc<ModelSlot>> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn corpus(&self) -> DemoCorpus {
        self.lock_corpus().corpus.clone()
    }

    fn lock_corpus(&self) -> std::sync::MutexGuard<'_, CorpusState> {
        self.corpus.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn lock_jobs(&self) -> std::sync::MutexGuard<'_, Jobs> {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/demos", post(post_demo).get(get_demos))
        .route("/api/demos/{id}", patch(patch_demo).delete(delete_demo))
        .route("/api/learn", post(post_learn))
        .route("/api/learn/{job}", get(get_job))
        .route("/api/grid", get(get_grid))
        .route("/api/model", get(get_model))
        .route("/api/scenario", get(get_scenario))
        .route("/ws/teleop", get(teleop))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn validation(errors: Vec<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": "validation failed", "violations": errors }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewDemo {
    id: Option<String>,
    reward: f64,
    #[serde(default = "recorded")]
    source: DemoSource,
    outcome: Option<Outcome>,
    points: Vec<DemoPoint>,
}

fn recorded() -> DemoSource {
    DemoSource::Recorded
}

#[derive(Debug, Serialize)]
struct DemoSummary {
    id: String,
    reward: f64,
    source: DemoSource,
    outcome: Outcome,
    points: usize,
}

async fn post_demo(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let new: NewDemo = parse_body(&body)?;
    let mut cs = st.lock_corpus();
    let id = match new.id {
        Some(id) if !id.is_empty() => id,
        _ => loop {
            cs.next_id += 1;
            let id = format!("demo-{}", cs.next_id);
            if !cs.corpus.demos.iter().any(|d| d.id == id) {
                break id;
            }
        },
    };
    let mut candidate = cs.corpus.clone();
    candidate.demos.push(Demonstration {
        id: id.clone(),
        reward: new.reward,
        source: new.source,
        outcome: new.outcome,
        points: new.points,
    });
    let errors = candidate.validate();
    if !errors.is_empty() {
        return Err(ApiError::validation(errors));
    }
    cs.corpus = candidate;
    cs.revision += 1;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn get_demos(State(st): State<Arc<AppState>>) -> Json<Value> {
    let cs = st.lock_corpus();
    let demos: Vec<DemoSummary> = cs
        .corpus
        .demos
        .iter()
        .map(|d| DemoSummary {
            id: d.id.clone(),
            reward: d.reward,
            source: d.source,
            outcome: d.outcome(),
            points: d.points.len(),
        })
        .collect();
    Json(json!({
        "dynamics": cs.corpus.dynamics,
        "revision": cs.revision,
        "total_points": cs.corpus.total_points(),
        "demos": demos,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankingEdit {
    reward: f64,
    /// Required to move a demo between success and failure.
    outcome: Option<Outcome>,
}

async fn patch_demo(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Demonstration>> {
    let edit: RankingEdit = parse_body(&body)?;
    let mut cs = st.lock_corpus();
    let mut candidate = cs.corpus.clone();
    let demo = candidate
        .demos
        .iter_mut()
        .find(|d| d.id == id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no demo '{id}'")))?;
    // the class stays put unless the edit names a new one
    demo.outcome = Some(edit.outcome.unwrap_or(demo.outcome()));
    demo.reward = edit.reward;
    let updated = demo.clone();
    let errors = candidate.validate();
    if !errors.is_empty() {
        return Err(ApiError::validation(errors));
    }
    cs.corpus = candidate;
    cs.revision += 1;
    Ok(Json(updated))
}

async fn delete_demo(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let mut cs = st.lock_corpus();
    let before = cs.corpus.demos.len();
    cs.corpus.demos.retain(|d| d.id != id);
    if cs.corpus.demos.len() == before {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no demo '{id}'")));
    }
    cs.revision += 1;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_learn(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let cfg = if body.iter().all(u8::is_ascii_whitespace) {
        LearnConfig::default()
    } else {
        let v: Value = parse_body(&body)?;
        let v = match v {
            Value::Object(mut m) => {
                // accept both a bare config and {"config": {...}}
                match m.remove("config") {
                    Some(inner) if m.is_empty() => inner,
                    Some(inner) => {
                        m.insert("config".into(), inner);
                        Value::Object(m)
                    }
                    None => Value::Object(m),
                }
            }
            other => other,
        };
        let cfg: LearnConfig =
            serde_json::from_value(v).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed config: {e}")))?;
        cfg.check().map_err(|e| ApiError::validation(vec![e.to_string()]))?;
        cfg
    };
    let (corpus, revision) = {
        let cs = st.lock_corpus();
        (cs.corpus.clone(), cs.revision)
    };
    let errors = corpus.validate();
    if !errors.is_empty() {
        return Err(ApiError::validation(errors));
    }
    let job = {
        let mut jobs = st.lock_jobs();
        if let Some(running) = jobs.running {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "a learn job is already running", "job": running }),
            });
        }
        jobs.next += 1;
        let job = jobs.next;
        jobs.running = Some(job);
        jobs.status.insert(job, JobStatus::Running);
        job
    };
    let worker = st.clone();
    tokio::spawn(async move {
        let st2 = worker.clone();
        let outcome = tokio::task::spawn_blocking(move || run_learn(&st2, &corpus, &cfg, revision)).await;
        let status = outcome.unwrap_or_else(|e| JobStatus::Failed {
            error: format!("learn job panicked: {e}"),
            report: None,
        });
        let mut jobs = worker.lock_jobs();
        jobs.status.insert(job, status);
        jobs.running = None;
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": job }))))
}

fn run_learn(st: &AppState, corpus: &DemoCorpus, cfg: &LearnConfig, revision: u64) -> JobStatus {
    let result = match learn(corpus, cfg) {
        Ok(r) => r,
        Err(e) => {
            return JobStatus::Failed {
                error: e.to_string(),
                report: None,
            }
        }
    };
    let report = result.report(cfg.epsilon_slack);
    if result.solver_status != SolverStatus::Optimal {
        return JobStatus::Failed {
            error: format!("solver finished with status {:?}", result.solver_status),
            report: Some(report),
        };
    }
    let installed = ModelFileV1::new(&result.model, corpus.dynamics, cfg, corpus)
        .and_then(|file| st.install_model(file, revision));
    match installed {
        Ok(model_version) => JobStatus::Done { report, model_version },
        Err(e) => JobStatus::Failed {
            error: e.to_string(),
            report: Some(report),
        },
    }
}

async fn get_job(State(st): State<Arc<AppState>>, Path(job): Path<u64>) -> ApiResult<Json<Value>> {
    let jobs = st.lock_jobs();
    let status = jobs
        .status
        .get(&job)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no job {job}")))?;
    let mut v = serde_json::to_value(status).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    v["job"] = json!(job);
    Ok(Json(v))
}

#[derive(Debug, Deserialize)]
struct GridQuery {
    nx: Option<usize>,
    ny: Option<usize>,
    tau: Option<f64>,
    /// Heading used to slice unicycle models.
    theta: Option<f64>,
}

#[derive(Debug, Serialize)]
struct GridResponse {
    grid: GridField,
    tau: f64,
    contour: Vec<Polyline>,
    model_version: u64,
}

async fn get_grid(State(st): State<Arc<AppState>>, Query(q): Query<GridQuery>) -> ApiResult<Json<GridResponse>> {
    let slot = st
        .model()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no model has been learned yet"))?;
    let nx = q.nx.unwrap_or(DEFAULT_RESOLUTION);
    let ny = q.ny.unwrap_or(DEFAULT_RESOLUTION);
    if !(2..=MAX_GRID_RESOLUTION).contains(&nx) || !(2..=MAX_GRID_RESOLUTION).contains(&ny) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("nx and ny must lie in 2..={MAX_GRID_RESOLUTION}"),
        ));
    }
    let tau = q.tau.unwrap_or(0.0);
    if !tau.is_finite() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "tau must be finite"));
    }
    let extra: Vec<f64> = match slot.dynamics.kind {
        DynamicsKind::Integrator2d => Vec::new(),
        DynamicsKind::Unicycle => vec![q.theta.unwrap_or(0.0)],
    };
    let bounds = st.config.scenario.workspace;
    let grid = tokio::task::spawn_blocking(move || {
        let grid = grid_eval(&slot.model, bounds, nx, ny, &extra)?;
        let contour = level_set(&grid, tau);
        Ok::<_, Error>(GridResponse {
            grid,
            tau,
            contour,
            model_version: slot.version,
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(Json(grid))
}

async fn get_model(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let slot = st
        .model()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no model has been learned yet"))?;
    let revision = st.lock_corpus().revision;
    let mut v =
        serde_json::to_value(&slot.file).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    v["stale"] = json!(revision != slot.corpus_revision);
    v["model_version"] = json!(slot.version);
    Ok(Json(v))
}

async fn get_scenario(State(st): State<Arc<AppState>>) -> Json<Scenario> {
    Json(st.config.scenario.clone())
}

async fn teleop(State(st): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.protocols([TELEOP_PROTOCOL]).on_upgrade(move |socket| teleop_session(st, socket))
}

/// Frames sent by the client. A frame may set the reference, the safety
/// level, or reset the session.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientFrame {
    u_ref: Option<Vec<f64>>,
    tau: Option<f64>,
    #[serde(default)]
    reset: bool,
    x0: Option<Vec<f64>>,
}

/// One simulator tick as reported to the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickFrame {
    pub tick: u64,
    pub x: Vec<f64>,
    /// `None` while no model is loaded.
    pub h: Option<f64>,
    pub u_out: Vec<f64>,
    pub intervened: bool,
    pub constraint_value: Option<f64>,
    pub filter_enabled: bool,
    pub model_version: Option<u64>,
    pub tau: f64,
}

struct Session {
    dynamics: DynamicsModel,
    x: Vec<f64>,
    x0: Vec<f64>,
    u_ref: Vec<f64>,
    filter: FilterConfig,
    tick: u64,
}

impl Session {
    fn new(st: &AppState, x0: Option<Vec<f64>>) -> Self {
        let kind = st.model().map(|s| s.dynamics.kind).unwrap_or(st.lock_corpus().corpus.dynamics);
        let dynamics = DynamicsModel::new(kind);
        let x0 = x0.unwrap_or_else(|| default_start(&st.config.scenario, &dynamics));
        Self {
            u_ref: vec![0.0; dynamics.control_dim()],
            x: x0.clone(),
            x0,
            dynamics,
            filter: st.config.filter.clone(),
            tick: 0,
        }
    }

    fn handle(&mut self, st: &AppState, text: &str) -> std::result::Result<(), String> {
        let frame: ClientFrame = serde_json::from_str(text).map_err(|e| format!("malformed frame: {e}"))?;
        if let Some(tau) = frame.tau {
            if !tau.is_finite() {
                return Err("tau must be finite".into());
            }
        }
        if let Some(x0) = &frame.x0 {
            if !frame.reset {
                return Err("x0 is only accepted with reset".into());
            }
            if x0.len() != self.dynamics.state_dim() || x0.iter().any(|v| !v.is_finite()) {
                return Err(format!("x0 must hold {} finite values", self.dynamics.state_dim()));
            }
        }
        if let Some(u) = &frame.u_ref {
            if u.len() != self.dynamics.control_dim() || u.iter().any(|v| !v.is_finite()) {
                return Err(format!("u_ref must hold {} finite values", self.dynamics.control_dim()));
            }
        }
        if frame.reset {
            let tau = self.filter.tolerance_tau;
            *self = Session::new(st, frame.x0.or_else(|| Some(self.x0.clone())));
            self.filter.tolerance_tau = tau;
        }
        if let Some(tau) = frame.tau {
            self.filter.tolerance_tau = tau;
        }
        if let Some(u) = frame.u_ref {
            self.u_ref = u;
        }
        Ok(())
    }

    fn step(&mut self, st: &AppState) -> std::result::Result<TickFrame, String> {
        // one snapshot per tick so h and ∇h come from the same model
        let slot = st.model().filter(|s| s.dynamics.kind == self.dynamics.kind);
        let frame = match &slot {
            Some(slot) => {
                let d = filter(&slot.model, &self.dynamics, &self.x, &self.u_ref, &self.filter).map_err(|e| e.to_string())?;
                self.x = self.dynamics.step(&self.x, &d.u_out, st.config.teleop_dt).map_err(|e| e.to_string())?.state;
                TickFrame {
                    tick: self.tick,
                    h: Some(slot.model.evaluate(&self.x).map_err(|e| e.to_string())?),
                    x: self.x.clone(),
                    u_out: d.u_out,
                    intervened: d.intervened,
                    constraint_value: Some(d.constraint_value),
                    filter_enabled: true,
                    model_version: Some(slot.version),
                    tau: self.filter.tolerance_tau,
                }
            }
            None => {
                let out = self.dynamics.step(&self.x, &self.u_ref, st.config.teleop_dt).map_err(|e| e.to_string())?;
                self.x = out.state;
                TickFrame {
                    tick: self.tick,
                    x: self.x.clone(),
                    h: None,
                    u_out: out.applied,
                    intervened: false,
                    constraint_value: None,
                    filter_enabled: false,
                    model_version: None,
                    tau: self.filter.tolerance_tau,
                }
            }
        };
        self.tick += 1;
        Ok(frame)
    }
}

fn default_start(scenario: &Scenario, dynamics: &DynamicsModel) -> Vec<f64> {
    let r = scenario.start_region;
    let mut x = vec![0.5 * (r.min[0] + r.max[0]), 0.5 * (r.min[1] + r.max[1])];
    if dynamics.kind == DynamicsKind::Unicycle {
        x.push(0.0);
    }
    x
}

async fn teleop_session(st: Arc<AppState>, mut socket: WebSocket) {
    let mut session = Session::new(&st, None);
    let period = Duration::from_secs_f64(1.0 / st.config.tick_hz.max(1e-3));
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = ticker.tick() => {
                let text = match session.step(&st) {
                    Ok(frame) => serde_json::to_string(&frame),
                    Err(e) => serde_json::to_string(&json!({ "error": e })),
                };
                let Ok(text) = text else { break };
                if socket.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(t))) => {
                    if let Err(e) = session.handle(&st, t.as_str()) {
                        let err = json!({ "error": e }).to_string();
                        if socket.send(Message::Text(err.into())).await.is_err() {
                            break;
                        }
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            }
        }
    }
    log::debug!("teleop session ended after {} ticks", session.tick);
}
