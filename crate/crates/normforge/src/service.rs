//! HTTP service that runs the human verification and triadic tasks.
//!
//! All state changes go through a JSON-lines write-ahead log in the data
//! directory, synced before the request is acknowledged; on start the log
//! is replayed to rebuild sessions and counts.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::info;
use normforge_core::SeededRng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::error::{Error, Result};
use crate::formats::{self, read_text, JUDGMENTS_HEADER, RESPONSES_HEADER};

pub const WAL_FILE: &str = "responses.wal.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Verification,
    Triadic,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "verification" => Some(Task::Verification),
            "triadic" => Some(Task::Triadic),
            _ => None,
        }
    }

    fn idx(self) -> usize {
        match self {
            Task::Verification => 0,
            Task::Triadic => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriadItem {
    pub target: String,
    pub option_a: String,
    pub option_b: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemPool {
    pub verification: Vec<(String, String)>,
    pub triadic: Vec<TriadItem>,
}

impl ItemPool {
    fn len(&self, task: Task) -> usize {
        match task {
            Task::Verification => self.verification.len(),
            Task::Triadic => self.triadic.len(),
        }
    }

    fn payload(&self, task: Task, id: usize) -> serde_json::Value {
        match task {
            Task::Verification => {
                let (c, f) = &self.verification[id];
                json!({"id": id, "kind": "verification", "concept": c, "feature": f})
            }
            Task::Triadic => {
                let t = &self.triadic[id];
                json!({"id": id, "kind": "triadic", "target": t.target,
                       "option_a": t.option_a, "option_b": t.option_b})
            }
        }
    }

    /// Reads `concept<TAB>feature` lines.
    pub fn load_verification(path: &Path) -> Result<Vec<(String, String)>> {
        let text = read_text(path)?;
        let mut out = Vec::new();
        for (i, l) in text.lines().enumerate() {
            if l.trim().is_empty() || l.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 2 || f[0].trim().is_empty() || f[1].trim().is_empty() {
                return Err(Error::parse(path, i + 1, "expected concept and feature"));
            }
            out.push((f[0].trim().to_string(), f[1].trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignmentPolicy {
    pub verification_batch: usize,
    /// `0` means the whole pool.
    pub triadic_batch: usize,
    /// Items at this many assignments stop being handed out; `None` means
    /// no limit.
    pub verification_target: Option<usize>,
    pub triadic_target: Option<usize>,
    pub seed: u64,
}

impl Default for AssignmentPolicy {
    fn default() -> Self {
        Self {
            verification_batch: 110,
            triadic_batch: 0,
            verification_target: Some(5),
            triadic_target: None,
            seed: 0,
        }
    }
}

impl AssignmentPolicy {
    fn batch(&self, task: Task, pool: usize) -> usize {
        let b = match task {
            Task::Verification => self.verification_batch,
            Task::Triadic => self.triadic_batch,
        };
        if b == 0 {
            pool
        } else {
            b.min(pool)
        }
    }

    fn target(&self, task: Task) -> Option<usize> {
        match task {
            Task::Verification => self.verification_target,
            Task::Triadic => self.triadic_target,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Event {
    Session {
        id: String,
        seq: u64,
        task: Task,
        participant: String,
        items: Vec<usize>,
    },
    Response {
        session: String,
        item: usize,
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        replacement: Option<usize>,
    },
}

#[derive(Debug, Clone)]
struct Session {
    task: Task,
    participant: String,
    items: Vec<usize>,
    answers: Vec<String>,
}

impl Session {
    fn cursor(&self) -> usize {
        self.answers.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Stored {
    task: Task,
    participant: String,
    item: usize,
    value: String,
}

#[derive(Debug)]
struct Store {
    wal: File,
    wal_path: PathBuf,
    seq: u64,
    sessions: HashMap<String, Session>,
    /// Outstanding and completed assignments per item, per task.
    assigned: [Vec<usize>; 2],
    responses: Vec<Stored>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ServiceError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown session")]
    UnknownSession,
    #[error("no items available for {0:?}")]
    EmptyPool(Task),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownTask(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownSession => StatusCode::NOT_FOUND,
            ServiceError::EmptyPool(_) | ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({"error": self.to_string()}))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionInfo {
    pub session: String,
    pub task: Task,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Next {
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ack {
    pub status: &'static str,
    pub position: usize,
    pub total: usize,
}

/// Service state shared by all handlers.
#[derive(Debug)]
pub struct Service {
    pool: ItemPool,
    policy: AssignmentPolicy,
    store: Mutex<Store>,
}

impl Service {
    /// Opens (or creates) the data directory and replays its log.
    pub fn open(data_dir: &Path, pool: ItemPool, policy: AssignmentPolicy) -> Result<Self> {
        fs::create_dir_all(data_dir).map_err(|e| Error::io(data_dir, e))?;
        let wal_path = data_dir.join(WAL_FILE);
        let events = if wal_path.exists() {
            let text = read_text(&wal_path)?;
            let complete = crate::clients::truncate_torn_tail(&wal_path, &text)?;
            complete
                .lines()
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str::<Event>(l)
                        .map_err(|e| Error::parse(&wal_path, i + 1, e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let wal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&wal_path)
            .map_err(|e| Error::io(&wal_path, e))?;
        let mut store = Store {
            wal,
            wal_path: wal_path.clone(),
            seq: 0,
            sessions: HashMap::new(),
            assigned: [
                vec![0; pool.verification.len()],
                vec![0; pool.triadic.len()],
            ],
            responses: Vec::new(),
        };
        let n = events.len();
        for (i, ev) in events.into_iter().enumerate() {
            store
                .apply(ev, &pool)
                .map_err(|m| Error::parse(&wal_path, i + 1, m))?;
        }
        if n > 0 {
            info!("replayed {n} events from {}", wal_path.display());
        }
        Ok(Self {
            pool,
            policy,
            store: Mutex::new(store),
        })
    }

    pub fn start_session(&self, task: &str, participant: &str) -> std::result::Result<SessionInfo, ServiceError> {
        let task = Task::parse(task).ok_or_else(|| ServiceError::UnknownTask(task.into()))?;
        let participant = participant.trim();
        if participant.is_empty() || participant.contains(['\t', '\n', '\r']) {
            return Err(ServiceError::BadRequest("participant must be a non-empty single-line string".into()));
        }
        let mut st = self.store.lock().expect("store lock");
        let seq = st.seq;
        let mut rng = SeededRng::with_stream(self.policy.seed, seq);
        let counts = &st.assigned[task.idx()];
        let target = self.policy.target(task);
        let mut candidates: Vec<(usize, u64, usize)> = (0..self.pool.len(task))
            .filter(|&i| target.is_none_or(|t| counts[i] < t))
            .map(|i| (counts[i], rng.next_u64(), i))
            .collect();
        if candidates.is_empty() {
            return Err(ServiceError::EmptyPool(task));
        }
        candidates.sort_unstable();
        let k = self.policy.batch(task, candidates.len());
        let mut items: Vec<usize> = candidates[..k].iter().map(|c| c.2).collect();
        rng.shuffle(&mut items);
        let id = uuid::Uuid::new_v4().simple().to_string();
        let ev = Event::Session {
            id: id.clone(),
            seq,
            task,
            participant: participant.to_string(),
            items: items.clone(),
        };
        st.commit(ev, &self.pool)?;
        Ok(SessionInfo {
            session: id,
            task,
            total: items.len(),
        })
    }

    pub fn next_item(&self, session: &str) -> std::result::Result<Next, ServiceError> {
        let st = self.store.lock().expect("store lock");
        let s = st.sessions.get(session).ok_or(ServiceError::UnknownSession)?;
        let total = s.items.len();
        let cursor = s.cursor();
        if cursor >= total {
            return Ok(Next {
                done: true,
                position: None,
                total,
                item: None,
            });
        }
        Ok(Next {
            done: false,
            position: Some(cursor),
            total,
            item: Some(self.pool.payload(s.task, s.items[cursor])),
        })
    }

    pub fn submit(&self, session: &str, item: usize, value: &str) -> std::result::Result<Ack, ServiceError> {
        let mut st = self.store.lock().expect("store lock");
        let s = st.sessions.get(session).ok_or(ServiceError::UnknownSession)?;
        let value = normalize_value(s.task, value)?;
        let cursor = s.cursor();
        let total = s.items.len();
        if let Some(pos) = s.items[..cursor].iter().position(|&i| i == item) {
            return if s.answers[pos] == value {
                Ok(Ack {
                    status: "duplicate",
                    position: cursor,
                    total,
                })
            } else {
                Err(ServiceError::Conflict(format!(
                    "item {item} was already answered {:?}",
                    s.answers[pos]
                )))
            };
        }
        if cursor >= total || s.items[cursor] != item {
            return Err(ServiceError::Conflict(format!(
                "item {item} is not the current item"
            )));
        }
        let replacement = if value == "skip" {
            let task = s.task;
            let target = self.policy.target(task);
            let counts = &st.assigned[task.idx()];
            // Least-assigned item this session has not seen, lowest id first.
            (0..self.pool.len(task))
                .filter(|i| !s.items.contains(i) && *i != item)
                .filter(|&i| target.is_none_or(|t| counts[i] < t))
                .min_by_key(|&i| (counts[i], i))
        } else {
            None
        };
        let ev = Event::Response {
            session: session.to_string(),
            item,
            value,
            replacement,
        };
        st.commit(ev, &self.pool)?;
        let s = &st.sessions[session];
        Ok(Ack {
            status: "stored",
            position: s.cursor(),
            total: s.items.len(),
        })
    }

    /// Stored responses in the ingestion format of the evaluation stages,
    /// in the order they were acknowledged.
    pub fn export(&self, task: &str) -> std::result::Result<String, ServiceError> {
        let task = Task::parse(task).ok_or_else(|| ServiceError::UnknownTask(task.into()))?;
        let st = self.store.lock().expect("store lock");
        let mut out = String::new();
        match task {
            Task::Verification => {
                out.push_str(JUDGMENTS_HEADER);
                out.push('\n');
                for r in st.responses.iter().filter(|r| r.task == task) {
                    let (c, f) = &self.pool.verification[r.item];
                    out.push_str(&format!("{}\t{c}\t{f}\t{}\n", r.participant, r.value));
                }
            }
            Task::Triadic => {
                out.push_str(RESPONSES_HEADER);
                out.push('\n');
                for r in st.responses.iter().filter(|r| r.task == task) {
                    out.push_str(&format!("{}\t{}\t{}\n", r.participant, r.item, r.value));
                }
            }
        }
        Ok(out)
    }

    /// Assignment counts per item for `task`.
    pub fn assigned_counts(&self, task: Task) -> Vec<usize> {
        self.store.lock().expect("store lock").assigned[task.idx()].clone()
    }

    /// Non-skip responses per item for `task`.
    pub fn judgment_counts(&self, task: Task) -> Vec<usize> {
        let st = self.store.lock().expect("store lock");
        let mut c = vec![0; self.pool.len(task)];
        for r in st.responses.iter().filter(|r| r.task == task && r.value != "skip") {
            c[r.item] += 1;
        }
        c
    }
}

fn normalize_value(task: Task, v: &str) -> std::result::Result<String, ServiceError> {
    let lower = v.trim().to_ascii_lowercase();
    match (task, lower.as_str()) {
        (Task::Verification, "true" | "false" | "skip") => Ok(lower),
        (Task::Triadic, "a" | "b") => Ok(lower.to_ascii_uppercase()),
        _ => Err(ServiceError::BadRequest(format!(
            "invalid response {v:?} for {task:?}"
        ))),
    }
}

impl Store {
    /// Writes the event durably, then applies it.
    fn commit(&mut self, ev: Event, pool: &ItemPool) -> std::result::Result<(), ServiceError> {
        let mut line = serde_json::to_string(&ev).expect("event serializes");
        line.push('\n');
        self.wal
            .write_all(line.as_bytes())
            .and_then(|_| self.wal.sync_data())
            .map_err(|e| ServiceError::Storage(format!("{}: {e}", self.wal_path.display())))?;
        self.apply(ev, pool).map_err(ServiceError::Storage)
    }

    fn apply(&mut self, ev: Event, pool: &ItemPool) -> std::result::Result<(), String> {
        match ev {
            Event::Session {
                id,
                seq,
                task,
                participant,
                items,
            } => {
                if items.iter().any(|&i| i >= pool.len(task)) {
                    return Err("session references an unknown item".into());
                }
                for &i in &items {
                    self.assigned[task.idx()][i] += 1;
                }
                self.seq = self.seq.max(seq + 1);
                self.sessions.insert(
                    id,
                    Session {
                        task,
                        participant,
                        items,
                        answers: Vec::new(),
                    },
                );
            }
            Event::Response {
                session,
                item,
                value,
                replacement,
            } => {
                let s = self
                    .sessions
                    .get_mut(&session)
                    .ok_or("response for unknown session")?;
                if s.items.get(s.cursor()) != Some(&item) {
                    return Err("response out of order".into());
                }
                let task = s.task;
                s.answers.push(value.clone());
                if value == "skip" {
                    self.assigned[task.idx()][item] -= 1;
                }
                if let Some(r) = replacement {
                    if r >= pool.len(task) {
                        return Err("replacement references an unknown item".into());
                    }
                    s.items.push(r);
                    self.assigned[task.idx()][r] += 1;
                }
                let participant = s.participant.clone();
                self.responses.push(Stored {
                    task,
                    participant,
                    item,
                    value,
                });
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct StartBody {
    task: String,
    participant: String,
}

#[derive(Deserialize)]
struct ResponseBody {
    item_id: usize,
    response: String,
}

async fn start_handler(State(svc): State<Arc<Service>>, Json(b): Json<StartBody>) -> Response {
    match svc.start_session(&b.task, &b.participant) {
        Ok(info) => (StatusCode::CREATED, Json(info)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn next_handler(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Response {
    match svc.next_item(&id) {
        Ok(n) => Json(n).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn response_handler(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<ResponseBody>,
) -> Response {
    match svc.submit(&id, b.item_id, &b.response) {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn export_handler(State(svc): State<Arc<Service>>, UrlPath(task): UrlPath<String>) -> Response {
    match svc.export(&task) {
        Ok(body) => ([(header::CONTENT_TYPE, "text/tab-separated-values; charset=utf-8")], body).into_response(),
        Err(e) => e.into_response(),
    }
}

/// API routes, plus the frontend bundle from `static_dir` for everything
/// else.
pub fn router(svc: Arc<Service>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", post(start_handler))
        .route("/api/session/{id}/next", get(next_handler))
        .route("/api/session/{id}/response", post(response_handler))
        .route("/api/export/{task}", get(export_handler))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Builds the item pool from a verification-pairs file and a triplets file.
pub fn load_pool(verification: Option<&Path>, triplets: Option<&Path>, labels: Option<&[String]>) -> Result<ItemPool> {
    let mut pool = ItemPool::default();
    if let Some(p) = verification {
        pool.verification = ItemPool::load_verification(p)?;
    }
    if let Some(p) = triplets {
        let text = read_text(p)?;
        // Triplet files name concepts by label; collect the labels they use
        // when no concept list is supplied.
        let owned: Vec<String>;
        let labels = match labels {
            Some(l) => l,
            None => {
                let mut set = std::collections::BTreeSet::new();
                for l in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
                    for f in l.split('\t').take(3) {
                        set.insert(formats::unescape_field(f).unwrap_or_else(|| f.to_string()));
                    }
                }
                owned = set.into_iter().collect();
                &owned
            }
        };
        pool.triadic = formats::load_triplets(p, labels)?
            .into_iter()
            .map(|t| TriadItem {
                target: labels[t.target.index()].clone(),
                option_a: labels[t.opt_a.index()].clone(),
                option_b: labels[t.opt_b.index()].clone(),
            })
            .collect();
    }
    Ok(pool)
}
