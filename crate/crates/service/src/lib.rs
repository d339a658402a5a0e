//! HTTP facade for interactive sessions.
//!
//! Each session runs on its own actor thread that owns the engine. Handlers
//! only enqueue commands and read the state the actor publishes, so the
//! engine keeps a single writer.
//!
//! Working directory layout:
//!
//! ```text
//! datasets/<name>.csv            (optional <name>_test.csv for a fixed split)
//! grammars/<name>.bnf
//! sessions/<id>/run.jsonl        engine events
//! sessions/<id>/interactions.jsonl
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::thread;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use evoflow::engine::{Decision, EngineConfig, EngineError, Feedback, Session, StartOptions, Status};
use evoflow::evaluation::{Clock, EvaluationRecord, WallClock};
use evoflow::experiment::{load_dataset, ExperimentResult, LoadedDataset, Split};
use evoflow::grammar::{parse_grammar, Grammar, HyperparamValueId, Violation};
use evoflow::interaction::{build_snapshot, Candidates, InteractionSnapshot, RegionPartition, Thresholds};
use evoflow::search::WorkflowSpec;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::oneshot;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("{0}")]
    NotFound(String),
    #[error("session is {actual}, expected {expected}")]
    WrongStatus { expected: String, actual: String },
    #[error("{0}")]
    Invalid(String),
    #[error("illegal removal batch")]
    IllegalRemovals(Vec<Violation>),
    #[error("session actor stopped")]
    ActorGone,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) | ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::WrongStatus { .. } => StatusCode::CONFLICT,
            ApiError::Invalid(_) | ApiError::IllegalRemovals(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::ActorGone | ApiError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::WrongStatus { expected, actual } => ApiError::WrongStatus {
                expected: expected.to_string(),
                actual: actual.to_string(),
            },
            EngineError::IllegalRemovals(v) => ApiError::IllegalRemovals(v),
            EngineError::InvalidConfig(_) | EngineError::InvalidDecision => ApiError::Invalid(e.to_string()),
            EngineError::Io(e) => ApiError::Io(e),
            other => ApiError::Invalid(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.to_string() });
        if let ApiError::IllegalRemovals(v) = &self {
            body["violations"] = json!(v.iter().map(ToString::to_string).collect::<Vec<_>>());
        }
        (self.status(), Json(body)).into_response()
    }
}

/// Lifecycle as seen over HTTP; `Failed` covers engines that could not start
/// or crashed mid-run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    Running,
    AwaitingFeedback,
    Finished,
    Failed,
}

impl From<Status> for SessionStatus {
    fn from(s: Status) -> Self {
        match s {
            Status::Running => SessionStatus::Running,
            Status::AwaitingFeedback => SessionStatus::AwaitingFeedback,
            Status::Finished => SessionStatus::Finished,
        }
    }
}

impl std::fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub dataset_name: String,
    pub config: EngineConfig,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
    pub status: SessionStatus,
    pub generation: usize,
    pub interactions_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionLogEntry {
    pub session_id: String,
    /// 1-based.
    pub interaction_index: usize,
    pub generation: usize,
    pub wall_time_spent_seconds: f64,
    pub thresholds: Thresholds,
    pub removed_algorithms: Vec<String>,
    pub removed_hyperparameter_values: Vec<HyperparamValueId>,
    pub decision: Decision,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct CreateSession {
    /// File stem under `datasets/`.
    pub dataset: String,
    /// File stem under `grammars/`; the built-in grammar when absent.
    #[serde(default)]
    pub grammar: Option<String>,
    /// EngineConfig fields to override, by name.
    #[serde(default)]
    pub config: serde_json::Map<String, Value>,
    /// Path, relative to the working directory, of a baseline result JSON
    /// whose timeline feeds the divergence series.
    #[serde(default)]
    pub baseline: Option<String>,
    /// Seed of the one-third test split (ignored for pre-split datasets).
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub removed_algorithms: Vec<String>,
    pub removed_hyperparameter_values: Vec<HyperparamValueId>,
    pub replaced_individuals: usize,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveView {
    pub workflow: WorkflowSpec,
    pub record: EvaluationRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResultView {
    pub session_id: String,
    pub archive: ArchiveView,
    pub cumulative_eval_time: f64,
    pub generations: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub run_log: PathBuf,
    pub interaction_log: PathBuf,
    pub interactions: Vec<InteractionLogEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineView {
    pub generation: usize,
    pub timeline: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatesView {
    pub thresholds: Thresholds,
    pub partition: RegionPartition,
    pub candidates: Candidates,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct ThresholdQuery {
    pub t_acc: Option<f64>,
    pub t_time: Option<f64>,
}

/// State the actor publishes for handlers to read.
#[derive(Debug)]
struct Published {
    status: SessionStatus,
    generation: usize,
    interactions_used: usize,
    timeline: Vec<f64>,
    snapshot: Option<Arc<Snapshot>>,
    result: Option<Arc<SessionResultView>>,
    interactions: Vec<InteractionLogEntry>,
    error: Option<String>,
}

#[derive(Debug)]
struct Snapshot {
    value: InteractionSnapshot,
    /// Serialized once so repeated reads are byte-identical.
    body: String,
    grammar: Arc<Grammar>,
    first_served: Mutex<Option<Instant>>,
    published_at: Instant,
}

struct FeedbackCommand {
    feedback: Feedback,
    received: Instant,
    snapshot: Arc<Snapshot>,
    reply: oneshot::Sender<Result<FeedbackAck, ApiError>>,
}

struct SessionEntry {
    id: String,
    dataset_name: String,
    config: EngineConfig,
    created_at: f64,
    baseline: Option<Vec<f64>>,
    published: RwLock<Published>,
    commands: Mutex<mpsc::Sender<FeedbackCommand>>,
}

impl SessionEntry {
    fn handle(&self) -> SessionHandle {
        let p = self.published.read().unwrap();
        SessionHandle {
            session_id: self.id.clone(),
            dataset_name: self.dataset_name.clone(),
            config: self.config.clone(),
            created_at: self.created_at,
            status: p.status,
            generation: p.generation,
            interactions_used: p.interactions_used,
            error: p.error.clone(),
        }
    }
}

/// Server settings; tests swap the clock for a deterministic one.
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub workdir: PathBuf,
    pub clock: Arc<dyn Clock>,
    pub workers: usize,
}

impl ServiceConfig {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            clock: Arc::new(WallClock),
            workers: 1,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> io::Result<Self> {
        for dir in ["datasets", "grammars", "sessions"] {
            fs::create_dir_all(config.workdir.join(dir))?;
        }
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                sessions: RwLock::new(HashMap::new()),
                counter: AtomicU64::new(0),
            }),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.inner.config.workdir.join("sessions").join(id)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/status", get(get_status))
        .route("/sessions/{id}/snapshot", get(get_snapshot))
        .route("/sessions/{id}/candidates", get(get_candidates))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .route("/sessions/{id}/result", get(get_result))
        .route("/sessions/{id}/timeline", get(get_timeline))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> io::Result<()> {
    let app = router(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app).await
}

fn load_named_dataset(workdir: &Path, name: &str, split_seed: u64) -> Result<LoadedDataset, ApiError> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(ApiError::NotFound(format!("unknown dataset `{name}`")));
    }
    let dir = workdir.join("datasets");
    let path = dir.join(format!("{name}.csv"));
    if !path.is_file() {
        return Err(ApiError::NotFound(format!("unknown dataset `{name}`")));
    }
    let test = dir.join(format!("{name}_test.csv"));
    let split = if test.is_file() {
        Split::PreSplit { test }
    } else {
        Split::one_third(split_seed)
    };
    load_dataset(&path, &split).map_err(|e| ApiError::Invalid(format!("dataset `{name}`: {e}")))
}

fn load_named_grammar(workdir: &Path, name: Option<&str>) -> Result<Grammar, ApiError> {
    let Some(name) = name else {
        return Ok(Grammar::default_grammar());
    };
    let path = workdir.join("grammars").join(format!("{name}.bnf"));
    if name.contains(['/', '\\']) || !path.is_file() {
        return Err(ApiError::NotFound(format!("unknown grammar `{name}`")));
    }
    let text = fs::read_to_string(&path)?;
    let g = parse_grammar(&text).map_err(|e| ApiError::Invalid(format!("grammar `{name}`: {e}")))?;
    let violations = g.validate();
    if !violations.is_empty() {
        return Err(ApiError::IllegalRemovals(violations));
    }
    Ok(g)
}

fn load_baseline(workdir: &Path, rel: &str) -> Result<Vec<f64>, ApiError> {
    let path = workdir.join(rel);
    if !path.is_file() {
        return Err(ApiError::NotFound(format!("unknown baseline `{rel}`")));
    }
    let r: ExperimentResult = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| ApiError::Invalid(format!("baseline `{rel}`: {e}")))?;
    Ok(r.timeline)
}

fn build_config(overrides: &serde_json::Map<String, Value>) -> Result<EngineConfig, ApiError> {
    let mut c = EngineConfig::default();
    for (k, v) in overrides {
        let text = match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        c.set(k, &text).map_err(|e| ApiError::Invalid(e.to_string()))?;
    }
    c.validate().map_err(|e| ApiError::Invalid(e.to_string()))?;
    Ok(c)
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateSession>) -> Result<(StatusCode, Json<SessionHandle>), ApiError> {
    let workdir = state.inner.config.workdir.clone();
    let ds = load_named_dataset(&workdir, &req.dataset, req.split_seed)?;
    let grammar = load_named_grammar(&workdir, req.grammar.as_deref())?;
    let baseline = req.baseline.as_deref().map(|b| load_baseline(&workdir, b)).transpose()?;
    let config = build_config(&req.config)?;

    let n = state.inner.counter.fetch_add(1, Ordering::Relaxed);
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    let id = format!("{}-{n}", now.as_millis());
    let dir = state.session_dir(&id);
    fs::create_dir_all(&dir)?;

    let (tx, rx) = mpsc::channel();
    let entry = Arc::new(SessionEntry {
        id: id.clone(),
        dataset_name: ds.name.clone(),
        config: config.clone(),
        created_at: now.as_secs_f64(),
        baseline,
        published: RwLock::new(Published {
            status: SessionStatus::Running,
            generation: 0,
            interactions_used: 0,
            timeline: Vec::new(),
            snapshot: None,
            result: None,
            interactions: Vec::new(),
            error: None,
        }),
        commands: Mutex::new(tx),
    });
    state.inner.sessions.write().unwrap().insert(id.clone(), entry.clone());

    let options = StartOptions {
        clock: state.inner.config.clock.clone(),
        workers: state.inner.config.workers,
        shared: None,
    };
    let actor = Actor {
        entry: entry.clone(),
        dir,
    };
    thread::Builder::new()
        .name(format!("session-{id}"))
        .spawn(move || actor.run(config, grammar, ds, options, rx))?;
    Ok((StatusCode::CREATED, Json(entry.handle())))
}

async fn get_status(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionHandle>, ApiError> {
    Ok(Json(state.session(&id)?.handle()))
}

fn current_snapshot(entry: &SessionEntry) -> Result<Arc<Snapshot>, ApiError> {
    let p = entry.published.read().unwrap();
    match (&p.snapshot, p.status) {
        (Some(s), SessionStatus::AwaitingFeedback) => Ok(s.clone()),
        _ => Err(ApiError::WrongStatus {
            expected: SessionStatus::AwaitingFeedback.to_string(),
            actual: p.status.to_string(),
        }),
    }
}

async fn get_snapshot(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let entry = state.session(&id)?;
    let snap = current_snapshot(&entry)?;
    snap.first_served.lock().unwrap().get_or_insert_with(Instant::now);
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], snap.body.clone()).into_response())
}

async fn get_candidates(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ThresholdQuery>,
) -> Result<Json<CandidatesView>, ApiError> {
    let entry = state.session(&id)?;
    let snap = current_snapshot(&entry)?;
    let th = Thresholds::new(q.t_acc, q.t_time).map_err(|e| ApiError::Invalid(e.to_string()))?;
    let with = snap.value.clone().with_thresholds(th, &snap.grammar);
    Ok(Json(CandidatesView {
        thresholds: th,
        partition: with.partition.expect("thresholds applied"),
        candidates: with.candidates.expect("thresholds applied"),
    }))
}

async fn post_feedback(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(feedback): Json<Feedback>,
) -> Result<Json<FeedbackAck>, ApiError> {
    let received = Instant::now();
    let entry = state.session(&id)?;
    // claim the pause so a concurrent submission sees 409
    let snapshot = {
        let mut p = entry.published.write().unwrap();
        let snap = match (&p.snapshot, p.status) {
            (Some(s), SessionStatus::AwaitingFeedback) => s.clone(),
            _ => {
                return Err(ApiError::WrongStatus {
                    expected: SessionStatus::AwaitingFeedback.to_string(),
                    actual: p.status.to_string(),
                })
            }
        };
        p.status = SessionStatus::Running;
        snap
    };
    let (reply, rx) = oneshot::channel();
    let sent = entry.commands.lock().unwrap().send(FeedbackCommand {
        feedback,
        received,
        snapshot,
        reply,
    });
    if sent.is_err() {
        return Err(ApiError::ActorGone);
    }
    rx.await.map_err(|_| ApiError::ActorGone)?.map(Json)
}

async fn get_result(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionResultView>, ApiError> {
    let entry = state.session(&id)?;
    let p = entry.published.read().unwrap();
    match &p.result {
        Some(r) => Ok(Json(r.as_ref().clone())),
        None => Err(ApiError::WrongStatus {
            expected: SessionStatus::Finished.to_string(),
            actual: p.status.to_string(),
        }),
    }
}

async fn get_timeline(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<TimelineView>, ApiError> {
    let entry = state.session(&id)?;
    let p = entry.published.read().unwrap();
    Ok(Json(TimelineView {
        generation: p.generation,
        timeline: p.timeline.clone(),
        baseline: entry.baseline.clone(),
    }))
}

struct Actor {
    entry: Arc<SessionEntry>,
    dir: PathBuf,
}

impl Actor {
    fn run(self, config: EngineConfig, grammar: Grammar, ds: LoadedDataset, options: StartOptions, rx: mpsc::Receiver<FeedbackCommand>) {
        if let Err(e) = self.drive(config, grammar, ds, options, rx) {
            let mut p = self.entry.published.write().unwrap();
            p.status = SessionStatus::Failed;
            p.snapshot = None;
            p.error = Some(e.to_string());
        }
    }

    fn drive(&self, config: EngineConfig, grammar: Grammar, ds: LoadedDataset, options: StartOptions, rx: mpsc::Receiver<FeedbackCommand>) -> Result<(), ApiError> {
        let log = BufWriter::new(File::create(self.dir.join("run.jsonl"))?);
        let mut interactions = OpenOptions::new().create(true).append(true).open(self.dir.join("interactions.jsonl"))?;
        let mut session = Session::start_logged(config, grammar, ds.train, options, Some(Box::new(log)))?;
        self.advance(&mut session)?;
        // the sender lives as long as the entry, so this ends with the process
        while let Ok(cmd) = rx.recv() {
            match self.apply(&mut session, &cmd, &mut interactions) {
                Ok(ack) => {
                    let _ = cmd.reply.send(Ok(ack));
                    self.advance(&mut session)?;
                }
                Err(e) => {
                    // untouched session: reopen the same pause
                    self.entry.published.write().unwrap().status = session.status().into();
                    let _ = cmd.reply.send(Err(e));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, session: &mut Session, cmd: &FeedbackCommand, log: &mut File) -> Result<FeedbackAck, ApiError> {
        let since = cmd.snapshot.first_served.lock().unwrap().unwrap_or(cmd.snapshot.published_at);
        let wall = cmd.received.saturating_duration_since(since).as_secs_f64();
        let outcome = session.apply_feedback(&cmd.feedback, Some(wall))?;
        let entry = InteractionLogEntry {
            session_id: self.entry.id.clone(),
            interaction_index: session.interactions_used(),
            generation: session.generation(),
            wall_time_spent_seconds: wall,
            thresholds: cmd.feedback.thresholds_used,
            removed_algorithms: outcome.removed_algorithms.clone(),
            removed_hyperparameter_values: outcome.removed_hyperparameter_values.clone(),
            decision: cmd.feedback.decision.clone(),
        };
        serde_json::to_writer(&mut *log, &entry).map_err(io::Error::from)?;
        log.write_all(b"\n")?;
        log.flush()?;
        let mut p = self.entry.published.write().unwrap();
        p.interactions.push(entry);
        p.interactions_used = session.interactions_used();
        p.snapshot = None;
        Ok(FeedbackAck {
            removed_algorithms: outcome.removed_algorithms,
            removed_hyperparameter_values: outcome.removed_hyperparameter_values,
            replaced_individuals: outcome.replaced_individuals,
            status: outcome.status.into(),
        })
    }

    /// Steps to the next pause or the end, publishing progress per generation.
    fn advance(&self, session: &mut Session) -> Result<(), ApiError> {
        while session.status() == Status::Running {
            session.step_generation()?;
            let mut p = self.entry.published.write().unwrap();
            p.generation = session.generation();
            p.timeline = session.timeline().to_vec();
        }
        match session.status() {
            Status::AwaitingFeedback => {
                let value = build_snapshot(session, self.entry.baseline.as_deref())?;
                let body = serde_json::to_string(&value).map_err(io::Error::from)?;
                let snap = Snapshot {
                    value,
                    body,
                    grammar: session.grammar().clone(),
                    first_served: Mutex::new(None),
                    published_at: Instant::now(),
                };
                let mut p = self.entry.published.write().unwrap();
                p.snapshot = Some(Arc::new(snap));
                p.status = SessionStatus::AwaitingFeedback;
            }
            Status::Finished => {
                let r = session.result()?;
                let mut p = self.entry.published.write().unwrap();
                let view = SessionResultView {
                    session_id: self.entry.id.clone(),
                    archive: ArchiveView {
                        workflow: r.archive.workflow.clone(),
                        record: r.archive.evaluation.clone().expect("archive is evaluated"),
                    },
                    cumulative_eval_time: r.cumulative_eval_time,
                    generations: session.generation(),
                    cache_hits: r.cache_hits,
                    cache_misses: r.cache_misses,
                    run_log: self.dir.join("run.jsonl"),
                    interaction_log: self.dir.join("interactions.jsonl"),
                    interactions: p.interactions.clone(),
                };
                p.generation = session.generation();
                p.timeline = r.timeline;
                p.result = Some(Arc::new(view));
                p.status = SessionStatus::Finished;
            }
            Status::Running => unreachable!("loop exits only when paused or finished"),
        }
        Ok(())
    }
}
