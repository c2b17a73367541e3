//! HTTP clients for chat-completion and embedding endpoints.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{debug, warn};
use normforge_core::reduction::PhraseEmbedding;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::formats::{escape_field, read_text, unescape_field};

/// Where a model is reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    /// Cache identity; defaults to the model name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Endpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            id: None,
        }
    }

    pub fn cache_id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    /// Total attempts per request, including the first.
    pub attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff_ms: 250,
            timeout_secs: 60,
            max_tokens: 8,
            temperature: 0.0,
        }
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

async fn with_retries<T, F, Fut>(settings: &HttpSettings, context: &str, mut f: F) -> Result<T>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = std::result::Result<T, Attempt>>,
{
    let attempts = settings.attempts.max(1);
    let mut last = String::new();
    for k in 0..attempts {
        if k > 0 {
            let delay = settings.backoff_ms.saturating_mul(1 << (k - 1).min(16));
            debug!("retrying {context} in {delay} ms: {last}");
            tokio::time::sleep(Duration::from_millis(delay)).await;
        }
        match f().await {
            Ok(v) => return Ok(v),
            Err(Attempt::Retry(m)) => last = m,
            Err(Attempt::Fatal(m)) => {
                return Err(Error::Transport {
                    context: context.to_string(),
                    attempts: k + 1,
                    message: m,
                })
            }
        }
    }
    Err(Error::Transport {
        context: context.to_string(),
        attempts,
        message: last,
    })
}

fn build_http(settings: &HttpSettings) -> Result<reqwest::Client> {
    reqwest::Client::builder()
        .timeout(Duration::from_secs(settings.timeout_secs.max(1)))
        .build()
        .map_err(|e| Error::Config(format!("http client: {e}")))
}

async fn post_json(
    http: &reqwest::Client,
    ep: &Endpoint,
    body: &serde_json::Value,
) -> std::result::Result<serde_json::Value, Attempt> {
    let mut req = http.post(&ep.url).json(body);
    if let Some(key) = &ep.api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(Attempt::Retry(format!("HTTP {status}")));
    }
    if !status.is_success() {
        let text = resp.text().await.unwrap_or_default();
        return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
    }
    resp.json::<serde_json::Value>()
        .await
        .map_err(|e| Attempt::Retry(format!("bad JSON body: {e}")))
}

/// Chat-completions client; one user message per request.
#[derive(Debug, Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    endpoint: Endpoint,
    settings: HttpSettings,
}

impl ChatClient {
    pub fn new(endpoint: Endpoint, settings: HttpSettings) -> Result<Self> {
        Ok(Self {
            http: build_http(&settings)?,
            endpoint,
            settings,
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Raw text of the first choice.
    pub async fn complete(&self, prompt: &str, context: &str) -> Result<String> {
        let body = json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": self.settings.max_tokens,
            "temperature": self.settings.temperature,
        });
        with_retries(&self.settings, context, || async {
            let v = post_json(&self.http, &self.endpoint, &body).await?;
            let msg = v
                .pointer("/choices/0/message")
                .ok_or_else(|| Attempt::Fatal("response has no choices[0].message".into()))?;
            Ok(match msg.get("content") {
                Some(serde_json::Value::String(s)) => s.clone(),
                Some(serde_json::Value::Null) | None => String::new(),
                Some(other) => other.to_string(),
            })
        })
        .await
    }
}

/// Embedding client for endpoints shaped like `{input: [..]}` →
/// `{data: [{index, embedding}]}`.
#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    http: reqwest::Client,
    endpoint: Endpoint,
    settings: HttpSettings,
    batch_size: usize,
}

impl EmbeddingClient {
    pub fn new(endpoint: Endpoint, settings: HttpSettings, batch_size: usize) -> Result<Self> {
        Ok(Self {
            http: build_http(&settings)?,
            endpoint,
            settings,
            batch_size: batch_size.max(1),
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub async fn embed_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({"model": self.endpoint.model, "input": inputs});
        let context = format!("embedding batch of {} starting {:?}", inputs.len(), inputs[0]);
        let n = inputs.len();
        with_retries(&self.settings, &context, || async {
            let v = post_json(&self.http, &self.endpoint, &body).await?;
            let data = v
                .get("data")
                .and_then(|d| d.as_array())
                .ok_or_else(|| Attempt::Fatal("response has no data array".into()))?;
            if data.len() != n {
                return Err(Attempt::Fatal(format!(
                    "asked for {n} embeddings, got {}",
                    data.len()
                )));
            }
            let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
            for (pos, item) in data.iter().enumerate() {
                let idx = item
                    .get("index")
                    .and_then(|i| i.as_u64())
                    .map(|i| i as usize)
                    .unwrap_or(pos);
                let emb: Vec<f64> = item
                    .get("embedding")
                    .and_then(|e| serde_json::from_value(e.clone()).ok())
                    .ok_or_else(|| Attempt::Fatal("malformed embedding".into()))?;
                match out.get_mut(idx) {
                    Some(slot @ None) => *slot = Some(emb),
                    _ => return Err(Attempt::Fatal(format!("bad or repeated index {idx}"))),
                }
            }
            Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
        })
        .await
    }
}

/// Append-only embedding cache keyed by (endpoint id, phrase).
///
/// Line format: `endpoint<TAB>phrase<TAB>v1 v2 ...`. An incomplete last line
/// is dropped on open.
#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    file: File,
    entries: BTreeMap<(String, String), Vec<f64>>,
}

impl EmbeddingCache {
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            let text = read_text(path)?;
            let complete = truncate_torn_tail(path, &text)?;
            let mut entries = BTreeMap::new();
            for (i, l) in complete.lines().enumerate() {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || Error::parse(path, i + 1, "malformed embedding cache line");
                if f.len() != 3 {
                    return Err(bad());
                }
                let v = f[2]
                    .split(' ')
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad())?;
                let ep = unescape_field(f[0]).ok_or_else(bad)?;
                let phrase = unescape_field(f[1]).ok_or_else(bad)?;
                entries.insert((ep, phrase), v);
            }
            entries
        } else {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            BTreeMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            entries,
        })
    }

    pub fn get(&self, endpoint: &str, phrase: &str) -> Option<&[f64]> {
        self.entries
            .get(&(endpoint.to_string(), phrase.to_string()))
            .map(Vec::as_slice)
    }

    pub fn insert(&mut self, endpoint: &str, phrase: &str, v: Vec<f64>) -> Result<()> {
        let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        let line = format!(
            "{}\t{}\t{}\n",
            escape_field(endpoint),
            escape_field(phrase),
            values.join(" ")
        );
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.entries
            .insert((endpoint.to_string(), phrase.to_string()), v);
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Drops a trailing partial line from an append-only file, returning the
/// complete prefix.
pub(crate) fn truncate_torn_tail<'a>(path: &Path, text: &'a str) -> Result<&'a str> {
    let keep = text.rfind('\n').map(|i| i + 1).unwrap_or(0);
    if keep < text.len() {
        warn!(
            "{}: dropping {} bytes of incomplete trailing record",
            path.display(),
            text.len() - keep
        );
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(&text[..keep])
}

/// Result of [`embed_phrases`]: embeddings in input order and how many
/// phrases had to be fetched.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub embeddings: Vec<PhraseEmbedding>,
    pub fetched: usize,
}

/// Embeds distinct phrases, consulting the cache first and fetching misses
/// in batches.
pub async fn embed_phrases(
    phrases: &[String],
    client: &EmbeddingClient,
    cache: &mut EmbeddingCache,
) -> Result<Embedded> {
    if phrases.is_empty() {
        return Err(Error::Config("no phrases to embed".into()));
    }
    let mut seen = HashSet::new();
    for p in phrases {
        if !seen.insert(p.as_str()) {
            return Err(normforge_core::Error::DuplicatePhrase(p.clone()).into());
        }
    }
    let ep = client.endpoint().cache_id().to_string();
    let missing: Vec<String> = phrases
        .iter()
        .filter(|p| cache.get(&ep, p).is_none())
        .cloned()
        .collect();
    for chunk in missing.chunks(client.batch_size) {
        let vectors = client.embed_batch(chunk).await?;
        for (p, v) in chunk.iter().zip(vectors) {
            cache.insert(&ep, p, v)?;
        }
    }
    if !missing.is_empty() {
        cache.sync()?;
    }
    let mut out = Vec::with_capacity(phrases.len());
    let mut dim = None;
    for p in phrases {
        let v = cache.get(&ep, p).expect("cached above").to_vec();
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(normforge_core::Error::DimensionMismatch {
                    phrase: p.clone(),
                    expected: d,
                    found: v.len(),
                }
                .into())
            }
            _ => {}
        }
        out.push(PhraseEmbedding {
            phrase: p.clone(),
            vector: v,
        });
    }
    Ok(Embedded {
        embeddings: out,
        fetched: missing.len(),
    })
}
