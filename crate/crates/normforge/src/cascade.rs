//! Verifying concept-feature pairs against chat models: a durable request
//! log that doubles as the response cache, the two-stage cascade, and
//! resumable matrix imputation.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use futures::StreamExt;
use log::{info, warn};
use normforge_core::verifier::{
    build_prompt, cache_key, parse_response, CascadeVerdict, PromptMode, PromptTemplate,
    VerificationRecord,
};
use normforge_core::{CellProvenance, ConceptId, FeatureId, NormMatrix};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::ChatClient;
use crate::error::{Error, Result};
use crate::formats::{self, escape_field, read_text, unescape_field};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub model: String,
    pub mode: PromptMode,
    pub raw_text: String,
    pub parsed: bool,
}

#[derive(Debug)]
struct LogInner {
    file: File,
    entries: HashMap<String, LogEntry>,
}

/// Append-only log of model responses, one line per request:
/// `cache_key<TAB>model<TAB>mode<TAB>raw_text<TAB>parsed`.
///
/// Every logged response is also a cache entry. A torn last line (from a
/// crash mid-write) is dropped when the log is opened.
#[derive(Debug)]
pub struct RequestLog {
    path: PathBuf,
    inner: Mutex<LogInner>,
}

impl RequestLog {
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = read_text(path)?;
            let complete = crate::clients::truncate_torn_tail(path, &text)?;
            for (i, l) in complete.lines().enumerate() {
                let (key, entry) = parse_log_line(l)
                    .ok_or_else(|| Error::parse(path, i + 1, "malformed request log line"))?;
                entries.insert(key, entry);
            }
        } else if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: Mutex::new(LogInner { file, entries }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<LogEntry> {
        self.inner.lock().expect("log lock").entries.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("log lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&self, r: &VerificationRecord) -> Result<()> {
        let line = format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.cache_key,
            escape_field(&r.model_id),
            r.mode.as_str(),
            escape_field(&r.raw_text),
            r.parsed
        );
        let mut g = self.inner.lock().expect("log lock");
        g.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        g.entries.insert(
            r.cache_key.clone(),
            LogEntry {
                model: r.model_id.clone(),
                mode: r.mode,
                raw_text: r.raw_text.clone(),
                parsed: r.parsed,
            },
        );
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        let g = self.inner.lock().expect("log lock");
        g.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

fn parse_log_line(l: &str) -> Option<(String, LogEntry)> {
    let f: Vec<&str> = l.split('\t').collect();
    if f.len() != 5 || f[0].len() != 64 {
        return None;
    }
    let parsed = match f[4] {
        "true" => true,
        "false" => false,
        _ => return None,
    };
    Some((
        f[0].to_string(),
        LogEntry {
            model: unescape_field(f[1])?,
            mode: PromptMode::parse(f[2])?,
            raw_text: unescape_field(f[3])?,
            parsed,
        },
    ))
}

/// One model plus prompt template.
#[derive(Debug, Clone)]
pub struct Stage {
    pub client: ChatClient,
    pub template: PromptTemplate,
}

impl Stage {
    pub fn model_id(&self) -> &str {
        self.client.endpoint().cache_id()
    }

    fn key(&self, concept: &str, feature: &str) -> String {
        cache_key(
            self.model_id(),
            self.template.mode(),
            &self.template.exemplars_digest(),
            concept,
            feature,
        )
    }
}

/// A pair to verify, with the labels the prompt uses.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub concept_id: ConceptId,
    pub feature_id: FeatureId,
    pub concept: &'a str,
    pub feature: &'a str,
}

impl<'a> PairRef<'a> {
    pub fn in_matrix(m: &'a NormMatrix, c: ConceptId, f: FeatureId) -> Result<Self> {
        let concept = m.concept(c).ok_or(normforge_core::Error::UnknownConcept(c.index()))?;
        let feature = m.feature(f).ok_or(normforge_core::Error::UnknownFeature(f.index()))?;
        Ok(Self {
            concept_id: c,
            feature_id: f,
            concept: &concept.label,
            feature: &feature.phrase,
        })
    }
}

/// Cache lookup, else one request. Returns the record and whether it is new
/// (not yet logged).
async fn fetch(pair: PairRef<'_>, stage: &Stage, log: &RequestLog) -> Result<(VerificationRecord, bool)> {
    let key = stage.key(pair.concept, pair.feature);
    let make = |raw_text: String, parsed: bool| VerificationRecord {
        concept_id: pair.concept_id,
        feature_id: pair.feature_id,
        model_id: stage.model_id().to_string(),
        mode: stage.template.mode(),
        raw_text,
        parsed,
        cache_key: key.clone(),
    };
    if let Some(e) = log.get(&key) {
        return Ok((make(e.raw_text, e.parsed), false));
    }
    let prompt = build_prompt(&stage.template, pair.concept, pair.feature)?;
    let context = format!(
        "{} on ({:?}, {:?})",
        stage.model_id(),
        pair.concept,
        pair.feature
    );
    let raw = stage.client.complete(&prompt, &context).await?;
    let parsed = parse_response(&raw);
    Ok((make(raw, parsed), true))
}

/// Cache-first verification of one pair; new responses are appended to the
/// log before returning.
pub async fn verify_pair(pair: PairRef<'_>, stage: &Stage, log: &RequestLog) -> Result<VerificationRecord> {
    let (rec, fresh) = fetch(pair, stage, log).await?;
    if fresh {
        log.append(&rec)?;
    }
    Ok(rec)
}

/// Verifies many pairs with one stage, up to `max_parallel` at a time.
/// Records come back, and new ones are logged, in input order.
pub async fn verify_many(
    pairs: &[PairRef<'_>],
    stage: &Stage,
    log: &RequestLog,
    max_parallel: usize,
) -> Result<Vec<VerificationRecord>> {
    let mut stream = futures::stream::iter(pairs.iter().map(|&p| fetch(p, stage, log)))
        .buffered(max_parallel.max(1));
    let mut out = Vec::with_capacity(pairs.len());
    while let Some(r) = stream.next().await {
        let (rec, fresh) = r?;
        if fresh {
            log.append(&rec)?;
        }
        out.push(rec);
    }
    log.sync()?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Cascade {
    pub stage1: Stage,
    pub stage2: Stage,
}

impl Cascade {
    /// Identity of the decision procedure, used to validate checkpoints.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in [&self.stage1, &self.stage2] {
            h.update(s.model_id().as_bytes());
            h.update([0]);
            h.update(s.template.mode().as_str().as_bytes());
            h.update([0]);
            h.update(s.template.exemplars_digest().as_bytes());
            h.update([0]);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Decision {
    verdict: CascadeVerdict,
    fresh: Vec<VerificationRecord>,
}

async fn decide(pair: PairRef<'_>, cascade: &Cascade, log: &RequestLog) -> Result<Decision> {
    let mut fresh = Vec::new();
    let (r1, new1) = fetch(pair, &cascade.stage1, log).await?;
    let stage1 = r1.parsed;
    if new1 {
        fresh.push(r1);
    }
    let stage2 = if stage1 {
        let (r2, new2) = fetch(pair, &cascade.stage2, log).await?;
        let v = r2.parsed;
        if new2 {
            fresh.push(r2);
        }
        Some(v)
    } else {
        None
    };
    Ok(Decision {
        verdict: CascadeVerdict { stage1, stage2 },
        fresh,
    })
}

/// Runs the cascade on one pair: stage 2 is asked only when stage 1 says
/// true, and the pair is accepted only if both do.
pub async fn run_cascade(pair: PairRef<'_>, cascade: &Cascade, log: &RequestLog) -> Result<CascadeVerdict> {
    let d = decide(pair, cascade, log).await?;
    for r in &d.fresh {
        log.append(r)?;
    }
    Ok(d.verdict)
}

#[derive(Debug, Clone)]
pub struct ImputeOptions {
    pub max_parallel: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop (as if killed) after this many decisions in this invocation.
    pub abort_after: Option<usize>,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self {
            max_parallel: 8,
            checkpoint_every: 1_000,
            checkpoint_dir: None,
            abort_after: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputeSummary {
    pub absent_cells: usize,
    pub stage1_true: usize,
    pub final_true: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    input_digest: String,
    cursor: usize,
    stage1_true: usize,
    final_true: usize,
}

#[derive(Debug, Clone)]
pub struct ImputeRun {
    pub matrix: NormMatrix,
    pub summary: ImputeSummary,
    /// Responses fetched from the network in this invocation.
    pub fetched: usize,
    pub resumed_from: usize,
}

fn input_digest(m: &NormMatrix, cascade: &Cascade) -> String {
    let mut h = Sha256::new();
    h.update(formats::matrix_to_string(m).as_bytes());
    h.update(cascade.digest().as_bytes());
    hex(&h.finalize())
}

fn write_checkpoint(dir: &Path, partial: &NormMatrix, p: &Progress) -> Result<()> {
    formats::save_matrix(partial, &dir.join("partial.nm"))?;
    let json = serde_json::to_string_pretty(p).expect("progress serializes");
    formats::write_atomic(&dir.join("progress.json"), json.as_bytes())
}

fn read_checkpoint(dir: &Path, digest: &str) -> Result<Option<(NormMatrix, Progress)>> {
    let pj = dir.join("progress.json");
    if !pj.exists() {
        return Ok(None);
    }
    let p: Progress = serde_json::from_str(&read_text(&pj)?).map_err(|e| Error::Corrupt {
        path: pj.clone(),
        message: e.to_string(),
    })?;
    if p.input_digest != digest {
        warn!("{}: checkpoint is for different inputs; starting over", dir.display());
        return Ok(None);
    }
    let m = formats::load_matrix(&dir.join("partial.nm"))?;
    Ok(Some((m, p)))
}

/// Fills every absent cell of `m` with a cascade verdict: accepted cells
/// become `AiImputed`, existing cells are never queried.
///
/// Pairs are processed in row-major order with up to `max_parallel`
/// requests in flight; results are applied and logged in that order, so
/// the log and the output do not depend on response timing. With a
/// checkpoint directory, progress is saved every `checkpoint_every`
/// decisions and on failure, and a later call with the same inputs resumes
/// from it. Pairs decided after the last checkpoint are answered from the
/// log on resume.
pub async fn impute_matrix(
    m: &NormMatrix,
    cascade: &Cascade,
    log: &RequestLog,
    opts: &ImputeOptions,
) -> Result<ImputeRun> {
    let absent: Vec<(ConceptId, FeatureId)> = m.absent_cells().collect();
    let digest = input_digest(m, cascade);
    let (mut out, mut progress) = match &opts.checkpoint_dir {
        Some(dir) => read_checkpoint(dir, &digest)?,
        None => None,
    }
    .unwrap_or_else(|| {
        (
            m.clone(),
            Progress {
                input_digest: digest.clone(),
                cursor: 0,
                stage1_true: 0,
                final_true: 0,
            },
        )
    });
    let resumed_from = progress.cursor;
    if resumed_from > 0 {
        info!("resuming imputation at {resumed_from}/{}", absent.len());
    }
    let checkpoint_every = opts.checkpoint_every.max(1);
    let mut fetched = 0usize;
    let mut done_here = 0usize;

    let pairs: Vec<PairRef<'_>> = absent[progress.cursor.min(absent.len())..]
        .iter()
        .map(|&(c, f)| PairRef::in_matrix(m, c, f))
        .collect::<Result<_>>()?;
    let mut stream = futures::stream::iter(pairs.into_iter().map(|p| async move {
        decide(p, cascade, log).await.map(|d| (p, d))
    }))
    .buffered(opts.max_parallel.max(1));

    let checkpoint = |out: &NormMatrix, progress: &Progress| -> Result<()> {
        log.sync()?;
        if let Some(dir) = &opts.checkpoint_dir {
            write_checkpoint(dir, out, progress)?;
        }
        Ok(())
    };

    while let Some(item) = stream.next().await {
        let (pair, d) = match item {
            Ok(v) => v,
            Err(e) => {
                checkpoint(&out, &progress)?;
                return Err(e);
            }
        };
        for r in &d.fresh {
            log.append(r)?;
        }
        fetched += d.fresh.len();
        progress.stage1_true += d.verdict.stage1 as usize;
        if d.verdict.accepted() {
            progress.final_true += 1;
            out.set(pair.concept_id, pair.feature_id, CellProvenance::AiImputed)?;
        }
        progress.cursor += 1;
        done_here += 1;
        if progress.cursor % checkpoint_every == 0 {
            checkpoint(&out, &progress)?;
        }
        if opts.abort_after == Some(done_here) && progress.cursor < absent.len() {
            checkpoint(&out, &progress)?;
            return Err(Error::Interrupted(progress.cursor));
        }
    }
    log.sync()?;
    if let Some(dir) = &opts.checkpoint_dir {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(ImputeRun {
        matrix: out,
        summary: ImputeSummary {
            absent_cells: absent.len(),
            stage1_true: progress.stage1_true,
            final_true: progress.final_true,
        },
        fetched,
        resumed_from,
    })
}
