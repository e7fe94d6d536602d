//! HTTP API for interactive labeling sessions.
//!
//! A session runs one query on a worker thread. Whenever selection needs a
//! label the worker publishes a sample and blocks until `POST .../label`
//! answers it.
//!
//! Routes:
//!
//! * `GET  /api/status`
//! * `POST /api/query` `{"text", "strategy"?, "budget"?, "seed"?}`; 409 while another session runs
//! * `GET  /api/session/{id}/sample`
//! * `POST /api/session/{id}/label` `{"seq", "label": true | false | null}`; null skips
//! * `GET  /api/session/{id}/candidates`
//! * `GET  /api/session/{id}/result`

use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use scenequery_core::select::{Phase, SelectionReport};
use scenequery_core::UnitId;

use crate::orchestrator::{Engine, PipelineConfig, QueryResult, Strategy, UnitLabeler};
use crate::registry::UdfSignature;
use crate::storage::{frame_patch, ImageSource, Mask};

/// How long a request waits for the worker to reach its next state.
pub const DEFAULT_WAIT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, Serialize)]
pub struct ObjectView {
    pub oid: u32,
    pub oname: String,
    pub bbox: [i32; 4],
}

#[derive(Clone, Debug, Serialize)]
pub struct Sample {
    pub seq: u64,
    pub concept: String,
    pub signature: String,
    pub description: String,
    pub unit: UnitId,
    pub phase: Phase,
    pub objects: Vec<ObjectView>,
    /// Base64 PNG of the unit's patch with boxes drawn, when frames exist.
    pub image_png: Option<String>,
    pub labels_used: usize,
    pub budget: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightSnapshot {
    pub concept: String,
    pub iteration: usize,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateBoard {
    pub concept: Option<String>,
    pub candidates: Vec<String>,
    pub history: Vec<WeightSnapshot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Working,
    AwaitingLabel,
    Finished,
    Failed,
}

struct SessionSlot {
    text: String,
    seq: u64,
    pending: Option<Sample>,
    answers: mpsc::Sender<Option<bool>>,
    board: CandidateBoard,
    result: Option<QueryResult>,
    error: Option<String>,
}

impl SessionSlot {
    fn state(&self) -> SessionState {
        if self.result.is_some() {
            SessionState::Finished
        } else if self.error.is_some() {
            SessionState::Failed
        } else if self.pending.is_some() {
            SessionState::AwaitingLabel
        } else {
            SessionState::Working
        }
    }

    fn view(&self, id: u64) -> Value {
        json!({
            "session": id,
            "state": self.state(),
            "sample": self.pending,
            "error": self.error,
        })
    }
}

#[derive(Default)]
struct Sessions {
    next_id: u64,
    running: Option<u64>,
    slots: BTreeMap<u64, SessionSlot>,
}

#[derive(Default)]
struct Shared {
    sessions: Mutex<Sessions>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Sessions> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut SessionSlot)) {
        let mut s = self.lock();
        if let Some(slot) = s.slots.get_mut(&id) {
            f(slot);
        }
        drop(s);
        self.changed.notify_all();
    }

    /// Blocks until `done` holds for session `id` or `wait` passes.
    fn wait_until(&self, id: u64, wait: Duration, done: impl Fn(&SessionSlot) -> bool) -> Option<Value> {
        let guard = self.lock();
        let (guard, _) = self
            .changed
            .wait_timeout_while(guard, wait, |s| s.slots.get(&id).is_some_and(|slot| !done(slot)))
            .unwrap_or_else(|e| e.into_inner());
        guard.slots.get(&id).map(|slot| slot.view(id))
    }
}

/// Publishes samples to the shared state and blocks for answers.
struct ChannelLabeler {
    id: u64,
    shared: Arc<Shared>,
    answers: mpsc::Receiver<Option<bool>>,
    engine: Engine,
    budget: usize,
    labels_used: usize,
}

impl ChannelLabeler {
    fn sample(&self, seq: u64, sig: &UdfSignature, unit: UnitId, phase: Phase) -> Sample {
        let tables = self.engine.store.read();
        let mut objects = Vec::new();
        let mut image_png = None;
        if let Some(view) = tables.tuple(unit) {
            let mut boxes = vec![view.o0.bbox];
            objects.push(ObjectView { oid: unit.o0, oname: view.o0.oname.into(), bbox: bbox(view.o0.bbox) });
            if let (Some(o1), Some(oid)) = (&view.o1, unit.o1) {
                boxes.push(o1.bbox);
                objects.push(ObjectView { oid, oname: o1.oname.into(), bbox: bbox(o1.bbox) });
            }
            if let Some(images) = &self.engine.env.images {
                image_png = patch_png(images.as_ref(), unit, &boxes);
            }
        }
        Sample {
            seq,
            concept: sig.name.clone(),
            signature: sig.text(),
            description: sig.description.clone(),
            unit,
            phase,
            objects,
            image_png,
            labels_used: self.labels_used,
            budget: self.budget,
        }
    }
}

fn bbox(b: scenequery_core::BBox) -> [i32; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

fn patch_png(images: &dyn ImageSource, unit: UnitId, boxes: &[scenequery_core::BBox]) -> Option<String> {
    let frame = images.frame_image(unit.vid, unit.fid).ok()?;
    let patch = frame_patch(&frame, boxes, true, Mask::None).ok()?;
    let mut out = Cursor::new(Vec::new());
    patch.write_to(&mut out, image::ImageFormat::Png).ok()?;
    Some(base64::engine::general_purpose::STANDARD.encode(out.into_inner()))
}

impl UnitLabeler for ChannelLabeler {
    fn label(&mut self, sig: &UdfSignature, unit: UnitId, phase: Phase) -> Option<bool> {
        let seq = self.shared.lock().slots.get(&self.id).map_or(0, |s| s.seq) + 1;
        let sample = self.sample(seq, sig, unit, phase);
        self.shared.update(self.id, |slot| {
            slot.seq = seq;
            slot.pending = Some(sample);
        });
        // A dropped sender means the server is shutting down.
        let answer = self.answers.recv().unwrap_or(None);
        if answer.is_some() {
            self.labels_used += 1;
        }
        answer
    }

    fn observe(&mut self, sig: &UdfSignature, candidates: &[String], report: &SelectionReport) {
        let Some(last) = report.iterations.last() else { return };
        let snapshot = WeightSnapshot { concept: sig.name.clone(), iteration: last.iteration, weights: last.weights.clone() };
        self.shared.update(self.id, |slot| {
            if slot.board.concept.as_deref() != Some(sig.name.as_str()) {
                slot.board.concept = Some(sig.name.clone());
                slot.board.candidates = candidates.to_vec();
            }
            slot.board.history.push(snapshot);
        });
    }
}

#[derive(Clone)]
pub struct AppState {
    engine: Engine,
    config: PipelineConfig,
    shared: Arc<Shared>,
    wait: Duration,
}

impl AppState {
    pub fn new(engine: Engine, config: PipelineConfig) -> Self {
        Self { engine, config, shared: Arc::default(), wait: DEFAULT_WAIT }
    }

    pub fn with_wait(mut self, wait: Duration) -> Self {
        self.wait = wait;
        self
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/query", post(start_query))
        .route("/api/session/{id}/sample", get(sample))
        .route("/api/session/{id}/label", post(label))
        .route("/api/session/{id}/candidates", get(candidates))
        .route("/api/session/{id}/result", get(result))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_found(id: u64) -> Response {
    error(StatusCode::NOT_FOUND, format!("no session {id}"))
}

async fn status(State(app): State<AppState>) -> Json<Value> {
    let s = app.shared.lock();
    let sessions: Vec<Value> = s
        .slots
        .iter()
        .map(|(id, slot)| json!({ "session": id, "text": slot.text, "state": slot.state() }))
        .collect();
    let udfs: Vec<String> = app.engine.registry.entries().iter().map(|u| u.summary()).collect();
    Json(json!({ "running": s.running, "sessions": sessions, "udfs": udfs }))
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    text: String,
    strategy: Option<Strategy>,
    budget: Option<usize>,
    seed: Option<u64>,
}

async fn start_query(State(app): State<AppState>, Json(req): Json<QueryRequest>) -> Response {
    let mut cfg = app.config.clone();
    if let Some(s) = req.strategy {
        cfg.strategy = s;
    }
    if let Some(b) = req.budget {
        cfg.selection.budget = b;
    }
    if let Some(seed) = req.seed {
        cfg.seed = seed;
    }
    let (tx, rx) = mpsc::channel();
    let id = {
        let mut s = app.shared.lock();
        if let Some(running) = s.running {
            return error(StatusCode::CONFLICT, format!("session {running} is still running"));
        }
        s.next_id += 1;
        let id = s.next_id;
        s.running = Some(id);
        let board = CandidateBoard { concept: None, candidates: Vec::new(), history: Vec::new() };
        s.slots.insert(
            id,
            SessionSlot { text: req.text.clone(), seq: 0, pending: None, answers: tx, board, result: None, error: None },
        );
        id
    };
    let shared = app.shared.clone();
    let engine = app.engine.clone();
    std::thread::spawn(move || {
        let mut labeler =
            ChannelLabeler { id, shared: shared.clone(), answers: rx, engine: engine.clone(), budget: cfg.selection.budget, labels_used: 0 };
        let outcome = engine.run_query(&req.text, &cfg, &mut labeler);
        {
            let mut s = shared.lock();
            if let Some(slot) = s.slots.get_mut(&id) {
                slot.pending = None;
                match outcome {
                    Ok(r) => slot.result = Some(r),
                    Err(e) => slot.error = Some(e.to_string()),
                }
            }
            s.running = None;
        }
        shared.changed.notify_all();
    });
    (StatusCode::ACCEPTED, Json(json!({ "session": id }))).into_response()
}

async fn wait_view(app: &AppState, id: u64, after_seq: Option<u64>) -> Response {
    let shared = app.shared.clone();
    let wait = app.wait;
    let view = tokio::task::spawn_blocking(move || {
        shared.wait_until(id, wait, |slot| {
            let fresh = slot.pending.as_ref().is_some_and(|p| after_seq.is_none_or(|s| p.seq > s));
            fresh || matches!(slot.state(), SessionState::Finished | SessionState::Failed)
        })
    })
    .await;
    match view {
        Ok(Some(v)) => Json(v).into_response(),
        Ok(None) => not_found(id),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// The pending sample, waiting for the worker to produce one if needed.
async fn sample(State(app): State<AppState>, Path(id): Path<u64>) -> Response {
    wait_view(&app, id, None).await
}

#[derive(Debug, Deserialize)]
struct LabelRequest {
    seq: u64,
    label: Option<bool>,
}

/// Answers the pending sample and returns the session's next state.
async fn label(State(app): State<AppState>, Path(id): Path<u64>, Json(req): Json<LabelRequest>) -> Response {
    {
        let mut s = app.shared.lock();
        let Some(slot) = s.slots.get_mut(&id) else { return not_found(id) };
        match &slot.pending {
            Some(p) if p.seq == req.seq => {}
            Some(p) => return error(StatusCode::CONFLICT, format!("sample {} is pending, not {}", p.seq, req.seq)),
            None => return error(StatusCode::CONFLICT, "no sample is pending"),
        }
        slot.pending = None;
        if slot.answers.send(req.label).is_err() {
            return error(StatusCode::GONE, "the session worker has stopped");
        }
    }
    wait_view(&app, id, Some(req.seq)).await
}

async fn candidates(State(app): State<AppState>, Path(id): Path<u64>) -> Response {
    let s = app.shared.lock();
    match s.slots.get(&id) {
        Some(slot) => Json(json!(slot.board)).into_response(),
        None => not_found(id),
    }
}

async fn result(State(app): State<AppState>, Path(id): Path<u64>) -> Response {
    let s = app.shared.lock();
    let Some(slot) = s.slots.get(&id) else { return not_found(id) };
    match (&slot.result, &slot.error) {
        (Some(r), _) => Json(json!(r)).into_response(),
        (None, Some(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.clone()),
        (None, None) => (StatusCode::ACCEPTED, Json(slot.view(id))).into_response(),
    }
}
