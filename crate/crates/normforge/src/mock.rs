//! Deterministic stand-ins for chat-completion and embedding endpoints.
//!
//! The chat mock answers from a script keyed by (model, concept, feature),
//! read from `model<TAB>concept<TAB>feature<TAB>response` lines; unscripted
//! pairs get the default answer. The embedding mock derives each vector
//! from a seeded generator keyed by the phrase's alias, so phrases sharing
//! an alias get nearly identical vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use normforge_core::SeededRng;
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::error::{Error, Result};
use crate::formats::{read_text, unescape_field};

#[derive(Debug, Clone, Default)]
pub struct ChatScript {
    pub default_answer: String,
    answers: BTreeMap<(String, String, String), String>,
}

impl ChatScript {
    pub fn new(default_answer: impl Into<String>) -> Self {
        Self {
            default_answer: default_answer.into(),
            answers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, model: &str, concept: &str, feature: &str, answer: &str) {
        self.answers.insert(
            (model.into(), concept.into(), feature.into()),
            answer.into(),
        );
    }

    pub fn answer(&self, model: &str, concept: &str, feature: &str) -> &str {
        self.answers
            .get(&(model.to_string(), concept.to_string(), feature.to_string()))
            .map(String::as_str)
            .unwrap_or(&self.default_answer)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &str, &str)> {
        self.answers
            .iter()
            .map(|((m, c, f), a)| (m.as_str(), c.as_str(), f.as_str(), a.as_str()))
    }

    pub fn load(path: &Path, default_answer: &str) -> Result<Self> {
        let text = read_text(path)?;
        let mut s = Self::new(default_answer);
        for (i, l) in text.lines().enumerate() {
            if l.trim().is_empty() || l.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(path, i + 1, "expected model, concept, feature, response"));
            }
            let answer = unescape_field(f[3]).ok_or_else(|| Error::parse(path, i + 1, "bad escape"))?;
            s.insert(f[0], f[1], f[2], &answer);
        }
        Ok(s)
    }
}

/// Failure injection for the chat mock.
#[derive(Debug, Clone, Default)]
pub struct FailurePlan {
    /// The first this-many requests get HTTP 500.
    pub fail_first: usize,
    /// Pairs (concept, feature) that always get HTTP 500.
    pub always_fail: BTreeSet<(String, String)>,
}

#[derive(Debug, Default)]
pub struct ChatState {
    script: ChatScript,
    failures: Mutex<FailurePlan>,
    calls: Mutex<BTreeMap<String, usize>>,
    seen: Mutex<Vec<(String, String, String)>>,
    total: AtomicUsize,
}

impl ChatState {
    /// Requests per model, including failed ones.
    pub fn calls(&self, model: &str) -> usize {
        self.calls.lock().unwrap().get(model).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    /// (model, concept, feature) of every request, in arrival order.
    pub fn requests(&self) -> Vec<(String, String, String)> {
        self.seen.lock().unwrap().clone()
    }

    pub fn reset_counts(&self) {
        self.calls.lock().unwrap().clear();
        self.seen.lock().unwrap().clear();
        self.total.store(0, Ordering::SeqCst);
    }

    pub fn set_failures(&self, plan: FailurePlan) {
        *self.failures.lock().unwrap() = plan;
    }
}

/// Concept and feature of the last question in a verification prompt.
pub fn extract_pair(prompt: &str) -> Option<(String, String)> {
    let start = prompt.rfind("Is the property [")? + "Is the property [".len();
    let rest = &prompt[start..];
    let sep = "] true for [";
    let mid = rest.find(sep)?;
    let feature = &rest[..mid];
    let rest = &rest[mid + sep.len()..];
    let end = rest.rfind("]?")?;
    Some((rest[..end].to_string(), feature.to_string()))
}

#[derive(Deserialize)]
struct ChatRequest {
    model: String,
    messages: Vec<ChatMessage>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[allow(dead_code)]
    role: String,
    content: String,
}

async fn chat_handler(State(st): State<Arc<ChatState>>, Json(req): Json<ChatRequest>) -> Response {
    st.total.fetch_add(1, Ordering::SeqCst);
    *st.calls.lock().unwrap().entry(req.model.clone()).or_insert(0) += 1;
    let prompt = req.messages.last().map(|m| m.content.as_str()).unwrap_or("");
    let Some((concept, feature)) = extract_pair(prompt) else {
        return (StatusCode::BAD_REQUEST, "no verification question in prompt").into_response();
    };
    st.seen
        .lock()
        .unwrap()
        .push((req.model.clone(), concept.clone(), feature.clone()));
    {
        let mut f = st.failures.lock().unwrap();
        if f.fail_first > 0 {
            f.fail_first -= 1;
            return (StatusCode::INTERNAL_SERVER_ERROR, "injected failure").into_response();
        }
        if f.always_fail.contains(&(concept.clone(), feature.clone())) {
            return (StatusCode::INTERNAL_SERVER_ERROR, "injected failure").into_response();
        }
    }
    let content = st.script.answer(&req.model, &concept, &feature);
    Json(json!({
        "object": "chat.completion",
        "model": req.model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop"
        }]
    }))
    .into_response()
}

async fn chat_stats(State(st): State<Arc<ChatState>>) -> Json<serde_json::Value> {
    let calls = st.calls.lock().unwrap().clone();
    Json(json!({"total": st.total_calls(), "by_model": calls}))
}

#[derive(Debug)]
pub struct EmbedState {
    dim: usize,
    aliases: BTreeMap<String, String>,
    calls: AtomicUsize,
    inputs: AtomicUsize,
}

impl EmbedState {
    pub fn new(dim: usize, aliases: BTreeMap<String, String>) -> Self {
        Self {
            dim,
            aliases,
            calls: AtomicUsize::new(0),
            inputs: AtomicUsize::new(0),
        }
    }

    /// Reads `phrase<TAB>alias` lines.
    pub fn load_aliases(path: &Path) -> Result<BTreeMap<String, String>> {
        let text = read_text(path)?;
        let mut out = BTreeMap::new();
        for (i, l) in text.lines().enumerate() {
            if l.trim().is_empty() || l.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 2 {
                return Err(Error::parse(path, i + 1, "expected phrase and alias"));
            }
            out.insert(f[0].to_string(), f[1].to_string());
        }
        Ok(out)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inputs(&self) -> usize {
        self.inputs.load(Ordering::SeqCst)
    }

    pub fn vector(&self, phrase: &str) -> Vec<f64> {
        let alias = self
            .aliases
            .get(phrase)
            .cloned()
            .unwrap_or_else(|| phrase.trim().to_lowercase());
        let mut base = seeded(&alias);
        let mut jitter = seeded(phrase);
        (0..self.dim)
            .map(|_| base.normal() + 1e-3 * jitter.normal())
            .collect()
    }
}

fn seeded(s: &str) -> SeededRng {
    let d = Sha256::digest(s.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    SeededRng::new(u64::from_le_bytes(b))
}

#[derive(Deserialize)]
struct EmbedRequest {
    input: Vec<String>,
}

async fn embed_handler(State(st): State<Arc<EmbedState>>, Json(req): Json<EmbedRequest>) -> Json<serde_json::Value> {
    st.calls.fetch_add(1, Ordering::SeqCst);
    st.inputs.fetch_add(req.input.len(), Ordering::SeqCst);
    let data: Vec<_> = req
        .input
        .iter()
        .enumerate()
        .map(|(i, p)| json!({"object": "embedding", "index": i, "embedding": st.vector(p)}))
        .collect();
    Json(json!({"object": "list", "data": data}))
}

/// A running mock server; shuts down when dropped.
#[derive(Debug)]
pub struct MockServer<S> {
    pub addr: SocketAddr,
    pub state: Arc<S>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl<S> MockServer<S> {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.await;
        }
    }
}

impl<S> Drop for MockServer<S> {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

async fn serve<S: Send + Sync + 'static>(router: Router, bind: SocketAddr, state: Arc<S>) -> Result<MockServer<S>> {
    let listener = TcpListener::bind(bind)
        .await
        .map_err(|e| Error::Config(format!("bind {bind}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Config(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(MockServer {
        addr,
        state,
        shutdown: Some(tx),
        handle: Some(handle),
    })
}

/// Serves `POST /v1/chat/completions` and `GET /stats`.
pub async fn spawn_chat(script: ChatScript, failures: FailurePlan, bind: SocketAddr) -> Result<MockServer<ChatState>> {
    let state = Arc::new(ChatState {
        script,
        failures: Mutex::new(failures),
        ..Default::default()
    });
    let router = Router::new()
        .route("/v1/chat/completions", post(chat_handler))
        .route("/stats", get(chat_stats))
        .with_state(state.clone());
    serve(router, bind, state).await
}

/// Serves `POST /v1/embeddings`.
pub async fn spawn_embeddings(state: EmbedState, bind: SocketAddr) -> Result<MockServer<EmbedState>> {
    let state = Arc::new(state);
    let router = Router::new()
        .route("/v1/embeddings", post(embed_handler))
        .with_state(state.clone());
    serve(router, bind, state).await
}

pub fn localhost() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}
