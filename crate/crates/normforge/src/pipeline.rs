//! Pipeline stages over an output directory.
//!
//! Each stage writes into `.staging/<stage>/` and is moved to `<stage>/`
//! only on success, together with a `manifest.json` listing SHA-256
//! digests of its inputs and outputs and of the configuration it depends
//! on. A failed stage's partial output is moved to `.quarantine/<stage>/`.
//! A stage whose manifest still matches its inputs, outputs and
//! configuration is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use normforge_core::judgment::{agreement, majority_votes, paired_t_test, AgreementReport, VectorSpace};
use normforge_core::norms::{feature_density_stats, feature_overlap_stats, build_elicitation_matrix};
use normforge_core::reduction::{cluster_phrases, sample_features, ClusterConfig, Linkage};
use normforge_core::sdt::{bootstrap_ci, confusion, d_prime, select_gold, Pair};
use normforge_core::similarity::{cosine_dissim, mine_triplets, procrustes, rank_discrepant, MiningConfig};
use normforge_core::tsne::{tsne_embed, TsneConfig};
use normforge_core::{CellProvenance, NormMatrix, View};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cascade::{self, hex, Cascade, ImputeOptions, PairRef, RequestLog, Stage};
use crate::clients::{embed_phrases, ChatClient, EmbeddingCache, EmbeddingClient};
use crate::config::{PipelineConfig, StageConfig};
use crate::error::{Error, Result};
use crate::formats::{self, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageName {
    Reduce,
    EvalVerifiers,
    Impute,
    Stats,
    Dissim,
    Procrustes,
    MineTriplets,
    EvalJudgments,
    Tsne,
}

impl StageName {
    pub const ALL: [StageName; 9] = [
        StageName::Reduce,
        StageName::EvalVerifiers,
        StageName::Impute,
        StageName::Stats,
        StageName::Dissim,
        StageName::Procrustes,
        StageName::MineTriplets,
        StageName::EvalJudgments,
        StageName::Tsne,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Reduce => "reduce",
            StageName::EvalVerifiers => "eval-verifiers",
            StageName::Impute => "impute",
            StageName::Stats => "stats",
            StageName::Dissim => "dissim",
            StageName::Procrustes => "procrustes",
            StageName::MineTriplets => "mine-triplets",
            StageName::EvalJudgments => "eval-judgments",
            StageName::Tsne => "tsne",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const REDUCED_MATRIX: &str = "reduce/matrix.nm";
pub const IMPUTED_MATRIX: &str = "impute/matrix.nm";
pub const HUMAN_DISSIM: &str = "dissim/human.csv";
pub const FULL_DISSIM: &str = "dissim/full.csv";
pub const TRIPLETS: &str = "mine-triplets/triplets.tsv";
pub const REQUEST_LOG: &str = "cache/requests.log";
pub const EMBEDDING_CACHE: &str = "cache/embeddings.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn to_json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

fn stage_identity(s: &StageConfig) -> Value {
    json!({"model": s.model, "id": s.id, "mode": s.mode})
}

/// An input file: where it lives and how the manifest names it.
struct Input {
    what: String,
    path: PathBuf,
    name: String,
    produced_by: Option<StageName>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    force: bool,
    /// Test hook: stop imputation after this many decisions.
    pub impute_abort_after: Option<usize>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let out = cfg.paths.out.clone();
        Self {
            cfg,
            out,
            force: false,
            impute_abort_after: None,
        }
    }

    pub fn with_out(mut self, out: PathBuf) -> Self {
        self.out = out;
        self
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Stages a full run executes: every stage whose inputs are configured.
    pub fn full_run(&self) -> Vec<StageName> {
        StageName::ALL
            .into_iter()
            .filter(|s| match s {
                StageName::EvalVerifiers => {
                    !self.cfg.verifiers.is_empty() && self.cfg.paths.judgments.is_some()
                }
                StageName::EvalJudgments => self.cfg.paths.responses.is_some(),
                _ => true,
            })
            .collect()
    }

    fn internal(&self, what: &str, rel: &str, by: StageName) -> Input {
        Input {
            what: what.into(),
            path: self.out.join(rel),
            name: rel.into(),
            produced_by: Some(by),
        }
    }

    fn external(&self, what: &str, path: Option<&PathBuf>) -> Result<Input> {
        let path = path.ok_or_else(|| Error::Config(format!("paths.{what} is not set")))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(Input {
            what: what.into(),
            path: path.clone(),
            name: format!("input/{name}"),
            produced_by: None,
        })
    }

    fn inputs(&self, stage: StageName) -> Result<Vec<Input>> {
        use StageName::*;
        let p = &self.cfg.paths;
        Ok(match stage {
            Reduce => vec![self.external("elicitation", Some(&p.elicitation))?],
            EvalVerifiers => vec![
                self.internal("reduced matrix", REDUCED_MATRIX, Reduce),
                self.external("judgments", p.judgments.as_ref())?,
            ],
            Impute => vec![self.internal("reduced matrix", REDUCED_MATRIX, Reduce)],
            Stats | Dissim | Tsne => vec![self.internal("imputed matrix", IMPUTED_MATRIX, Impute)],
            Procrustes | MineTriplets => vec![
                self.internal("human dissimilarities", HUMAN_DISSIM, Dissim),
                self.internal("full dissimilarities", FULL_DISSIM, Dissim),
            ],
            EvalJudgments => {
                let mut v = vec![
                    self.internal("triplets", TRIPLETS, MineTriplets),
                    self.internal("human dissimilarities", HUMAN_DISSIM, Dissim),
                    self.internal("full dissimilarities", FULL_DISSIM, Dissim),
                    self.external("responses", p.responses.as_ref())?,
                ];
                if p.word_vectors.is_some() {
                    v.push(self.external("word_vectors", p.word_vectors.as_ref())?);
                }
                v
            }
        })
    }

    fn stage_settings(&self, stage: StageName) -> Value {
        use StageName::*;
        let c = &self.cfg;
        let decoding = json!({"max_tokens": c.http.max_tokens, "temperature": c.http.temperature});
        match stage {
            Reduce => json!({
                "reduce": c.reduce,
                "embedding": c.embedding.as_ref().map(|e| json!({"model": e.model, "id": e.id})),
            }),
            EvalVerifiers => json!({
                "evaluation": {"min_judgments": c.evaluation.min_judgments, "bootstrap": c.evaluation.bootstrap},
                "verifiers": c.verifiers.iter().map(|v| json!({"name": v.name, "stage": stage_identity(&v.stage)})).collect::<Vec<_>>(),
                "exemplars": c.exemplars,
                "decoding": decoding,
            }),
            Impute => json!({
                "cascade": c.cascade.as_ref().map(|k| json!({
                    "stage1": stage_identity(&k.stage1),
                    "stage2": stage_identity(&k.stage2),
                })),
                "exemplars": c.exemplars,
                "decoding": decoding,
            }),
            MineTriplets => json!({"mining": c.mining}),
            Tsne => json!({"tsne": c.tsne}),
            Stats | Dissim | Procrustes | EvalJudgments => json!({}),
        }
    }

    fn config_digest(&self, stage: StageName) -> String {
        let v = json!({
            "stage": stage.as_str(),
            "seed": self.cfg.seed,
            "settings": self.stage_settings(stage),
        });
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    /// Checks that every input of `stages` exists, or is produced by an
    /// earlier stage in the list, and that the endpoints they need are
    /// configured. Runs before any network traffic.
    pub fn preflight(&self, stages: &[StageName]) -> Result<()> {
        for (k, &s) in stages.iter().enumerate() {
            for input in self.inputs(s)? {
                let planned = input
                    .produced_by
                    .is_some_and(|by| stages[..k].contains(&by));
                if !planned && !input.path.is_file() {
                    return Err(Error::MissingInput {
                        what: format!("{} for stage {s}", input.what),
                        path: input.path,
                    });
                }
            }
            match s {
                StageName::Reduce if self.cfg.embedding.is_none() => {
                    return Err(Error::Config("stage reduce needs an [embedding] endpoint".into()))
                }
                StageName::EvalVerifiers if self.cfg.verifiers.is_empty() => {
                    return Err(Error::Config("stage eval-verifiers needs [[verifiers]]".into()))
                }
                StageName::Impute if self.cfg.cascade.is_none() => {
                    return Err(Error::Config("stage impute needs a [cascade] section".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub async fn run(&self, stages: &[StageName]) -> Result<Vec<(StageName, StageStatus)>> {
        self.preflight(stages)?;
        let mut out = Vec::new();
        for &s in stages {
            out.push((s, self.execute(s).await?));
        }
        Ok(out)
    }

    fn up_to_date(&self, stage: StageName, inputs: &[FileDigest], digest: &str) -> bool {
        let path = self.out.join(stage.as_str()).join("manifest.json");
        let Ok(text) = fs::read_to_string(&path) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
            return false;
        };
        m.config_digest == digest
            && m.inputs == inputs
            && m.outputs.iter().all(|o| {
                sha256_file(&self.out.join(&o.path)).is_ok_and(|h| h == o.sha256)
            })
    }

    async fn execute(&self, stage: StageName) -> Result<StageStatus> {
        let mut inputs = Vec::new();
        for i in self.inputs(stage)? {
            if !i.path.is_file() {
                return Err(Error::MissingInput {
                    what: format!("{} for stage {stage}", i.what),
                    path: i.path,
                });
            }
            inputs.push(FileDigest {
                path: i.name,
                sha256: sha256_file(&i.path)?,
            });
        }
        let digest = self.config_digest(stage);
        if !self.force && self.up_to_date(stage, &inputs, &digest) {
            info!("{stage}: up to date");
            return Ok(StageStatus::UpToDate);
        }
        info!("{stage}: running");
        let staging = self.out.join(".staging").join(stage.as_str());
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

        if let Err(e) = self.run_stage(stage, &staging).await {
            let q = self.out.join(".quarantine").join(stage.as_str());
            if q.exists() {
                let _ = fs::remove_dir_all(&q);
            }
            if let Some(parent) = q.parent() {
                let _ = fs::create_dir_all(parent);
            }
            match fs::rename(&staging, &q) {
                Ok(()) => warn!("{stage}: failed; partial output moved to {}", q.display()),
                Err(err) => warn!("{stage}: failed; could not quarantine output: {err}"),
            }
            return Err(e);
        }

        let mut names: Vec<String> = fs::read_dir(&staging)
            .map_err(|e| Error::io(&staging, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.json")
            .collect();
        names.sort();
        let mut outputs = Vec::new();
        for n in names {
            outputs.push(FileDigest {
                path: format!("{stage}/{n}"),
                sha256: sha256_file(&staging.join(&n))?,
            });
        }
        let manifest = Manifest {
            stage: stage.as_str().into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            config_digest: digest,
            inputs,
            outputs,
        };
        write_atomic(&staging.join("manifest.json"), to_json(&manifest).as_bytes())?;
        let dest = self.out.join(stage.as_str());
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        }
        fs::rename(&staging, &dest).map_err(|e| Error::io(&dest, e))?;
        Ok(StageStatus::Ran)
    }

    async fn run_stage(&self, stage: StageName, dir: &Path) -> Result<()> {
        use StageName::*;
        match stage {
            Reduce => self.reduce(dir).await,
            EvalVerifiers => self.eval_verifiers(dir).await,
            Impute => self.impute(dir).await,
            Stats => self.stats(dir),
            Dissim => self.dissim(dir),
            Procrustes => self.procrustes(dir),
            MineTriplets => self.mine(dir),
            EvalJudgments => self.eval_judgments(dir),
            Tsne => self.tsne(dir),
        }
    }

    fn put(&self, dir: &Path, name: &str, contents: &str) -> Result<()> {
        write_atomic(&dir.join(name), contents.as_bytes())
    }

    fn chat_stage(&self, s: &StageConfig) -> Result<Stage> {
        Ok(Stage {
            client: ChatClient::new(s.endpoint(), self.cfg.http.clone())?,
            template: self.cfg.template(s.mode()?)?,
        })
    }

    async fn reduce(&self, dir: &Path) -> Result<()> {
        let records = formats::load_elicitation(&self.cfg.paths.elicitation)?;
        let el = build_elicitation_matrix(&records, self.cfg.reduce.min_producers)?;
        for c in &el.collisions {
            warn!(
                "line {}: concept {:?} folded into {:?}",
                c.line, c.variant, c.canonical
            );
        }
        let emb_cfg = self
            .cfg
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Config("missing [embedding]".into()))?;
        let client = EmbeddingClient::new(emb_cfg.endpoint(), self.cfg.http.clone(), emb_cfg.batch_size)?;
        let mut cache = EmbeddingCache::open(&self.out.join(EMBEDDING_CACHE))?;
        let phrases: Vec<String> = el.matrix.features().iter().map(|f| f.phrase.clone()).collect();
        let embedded = embed_phrases(&phrases, &client, &mut cache).await?;
        info!("reduce: {} phrases, {} fetched", phrases.len(), embedded.fetched);

        let cluster_cfg = ClusterConfig {
            merge_threshold: self.cfg.reduce.merge_threshold,
            linkage: Linkage::Average,
            sample_size: self.cfg.reduce.sample_size.unwrap_or(usize::MAX),
            seed: self.cfg.seed,
        };
        let merged = cluster_phrases(&embedded.embeddings, &cluster_cfg, &el.phrase_frequency)?;
        let n_clusters = merged.len();
        let mut m = el.matrix.merge_features(merged)?;
        if let Some(k) = self.cfg.reduce.sample_size {
            let cfg = ClusterConfig {
                sample_size: k,
                ..cluster_cfg
            };
            let keep: Vec<_> = sample_features(m.features(), &cfg)?.iter().map(|f| f.id).collect();
            m = m.restrict_features(&keep)?;
        }
        formats::save_matrix(&m, &dir.join("matrix.nm"))?;
        let summary = json!({
            "records": records.len(),
            "concepts": m.n_concepts(),
            "raw_phrases": phrases.len(),
            "clusters": n_clusters,
            "features": m.n_features(),
            "human_cells": m.count(View::HumanOnly),
            "label_collisions": el.collisions.iter().map(|c| json!({
                "line": c.line, "canonical": c.canonical, "variant": c.variant,
            })).collect::<Vec<_>>(),
        });
        self.put(dir, "summary.json", &to_json(&summary))
    }

    async fn eval_verifiers(&self, dir: &Path) -> Result<()> {
        let m = formats::load_matrix(&self.out.join(REDUCED_MATRIX))?;
        let judgments_path = self.cfg.paths.judgments.as_ref().expect("checked in preflight");
        let records = formats::load_judgments(judgments_path, &m)?;
        let gold = select_gold(&records, self.cfg.evaluation.min_judgments);
        let positives = gold.iter().filter(|g| g.label).count();
        info!("eval-verifiers: {} gold pairs ({positives} true)", gold.len());
        let log = RequestLog::open(&self.out.join(REQUEST_LOG))?;
        let pairs: Vec<PairRef<'_>> = gold
            .iter()
            .map(|g| PairRef::in_matrix(&m, g.concept_id, g.feature_id))
            .collect::<Result<_>>()?;

        let mut reports = Vec::new();
        let mut predictions = String::from("#verifier\tconcept\tfeature\tgold\tpredicted\n");
        for v in &self.cfg.verifiers {
            let stage = self.chat_stage(&v.stage)?;
            let recs = cascade::verify_many(&pairs, &stage, &log, self.cfg.evaluation.max_parallel).await?;
            let by_pair: BTreeMap<Pair, bool> = recs
                .iter()
                .map(|r| ((r.concept_id, r.feature_id), r.parsed))
                .collect();
            for (g, r) in gold.iter().zip(&recs) {
                let p = PairRef::in_matrix(&m, g.concept_id, g.feature_id)?;
                predictions.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    v.name,
                    formats::escape_field(p.concept),
                    formats::escape_field(p.feature),
                    g.label,
                    r.parsed
                ));
            }
            let counts = confusion(&gold, |p| by_pair.get(&p).copied())?;
            let mut report = json!({
                "name": v.name,
                "model": stage.model_id(),
                "mode": stage.template.mode().as_str(),
                "counts": {
                    "hits": counts.hits,
                    "misses": counts.misses,
                    "false_alarms": counts.false_alarms,
                    "correct_rejections": counts.correct_rejections,
                },
            });
            match d_prime(&counts) {
                Ok(d) => {
                    let (lo, hi) = bootstrap_ci(
                        &gold,
                        |p| by_pair.get(&p).copied(),
                        self.cfg.evaluation.bootstrap,
                        self.cfg.seed,
                    )?;
                    report["hit_rate"] = json!(d.hit_rate);
                    report["fa_rate"] = json!(d.fa_rate);
                    report["d_prime"] = json!(d.d_prime);
                    report["ci_low"] = json!(lo);
                    report["ci_high"] = json!(hi);
                }
                Err(e) => report["error"] = json!(e.to_string()),
            }
            reports.push(report);
        }
        let report = json!({
            "gold": {
                "pairs": gold.len(),
                "true": positives,
                "false": gold.len() - positives,
                "min_judgments": self.cfg.evaluation.min_judgments,
            },
            "bootstrap": self.cfg.evaluation.bootstrap,
            "seed": self.cfg.seed,
            "verifiers": reports,
        });
        self.put(dir, "predictions.tsv", &predictions)?;
        self.put(dir, "report.json", &to_json(&report))
    }

    async fn impute(&self, dir: &Path) -> Result<()> {
        let m = formats::load_matrix(&self.out.join(REDUCED_MATRIX))?;
        let cc = self.cfg.cascade.as_ref().expect("checked in preflight");
        let cascade = Cascade {
            stage1: self.chat_stage(&cc.stage1)?,
            stage2: self.chat_stage(&cc.stage2)?,
        };
        let log = RequestLog::open(&self.out.join(REQUEST_LOG))?;
        let opts = ImputeOptions {
            max_parallel: cc.max_parallel,
            checkpoint_every: cc.checkpoint_every,
            checkpoint_dir: Some(self.out.join(".checkpoints").join("impute")),
            abort_after: self.impute_abort_after,
        };
        let run = cascade::impute_matrix(&m, &cascade, &log, &opts).await?;
        info!(
            "impute: {} absent, {} stage-1 true, {} accepted, {} requests sent",
            run.summary.absent_cells, run.summary.stage1_true, run.summary.final_true, run.fetched
        );
        formats::save_matrix(&run.matrix, &dir.join("matrix.nm"))?;
        let summary = json!({
            "absent_cells": run.summary.absent_cells,
            "stage1_true": run.summary.stage1_true,
            "final_true": run.summary.final_true,
            "human_cells": run.matrix.count(View::HumanOnly),
            "full_cells": run.matrix.count(View::Full),
            "stage1_model": cascade.stage1.model_id(),
            "stage2_model": cascade.stage2.model_id(),
        });
        self.put(dir, "summary.json", &to_json(&summary))
    }

    fn stats(&self, dir: &Path) -> Result<()> {
        let m = formats::load_matrix(&self.out.join(IMPUTED_MATRIX))?;
        let view_stats = |v: View| {
            let d = feature_density_stats(&m, v);
            let o = feature_overlap_stats(&m, v);
            json!({
                "cells": m.count(v),
                "features_per_concept": {"mean": d.mean, "median": d.median, "histogram": d.histogram},
                "concepts_per_feature": {
                    "mean": o.mean,
                    "singleton_fraction": o.singleton_fraction,
                    "histogram": o.histogram,
                },
            })
        };
        let human = m.row_counts(View::HumanOnly);
        let full = m.row_counts(View::Full);
        let per_concept: Vec<Value> = m
            .concepts()
            .iter()
            .map(|c| json!({"label": c.label, "human": human[c.id.index()], "full": full[c.id.index()]}))
            .collect();
        let report = json!({
            "concepts": m.n_concepts(),
            "features": m.n_features(),
            "human": view_stats(View::HumanOnly),
            "full": view_stats(View::Full),
            "per_concept": per_concept,
        });
        self.put(dir, "stats.json", &to_json(&report))
    }

    fn dissim(&self, dir: &Path) -> Result<()> {
        let m = formats::load_matrix(&self.out.join(IMPUTED_MATRIX))?;
        for v in [View::HumanOnly, View::Full] {
            let d = cosine_dissim(&m, v)?;
            self.put(dir, &format!("{}.csv", v.name()), &formats::dissim_to_csv(&d)?)?;
        }
        Ok(())
    }

    fn load_dissims(&self) -> Result<(normforge_core::similarity::DissimilarityMatrix, normforge_core::similarity::DissimilarityMatrix)> {
        Ok((
            formats::load_dissim_csv(&self.out.join(HUMAN_DISSIM))?,
            formats::load_dissim_csv(&self.out.join(FULL_DISSIM))?,
        ))
    }

    fn procrustes(&self, dir: &Path) -> Result<()> {
        let (human, full) = self.load_dissims()?;
        let r = procrustes(&human, &full)?;
        if r.degenerate {
            warn!("procrustes: degenerate configuration (rank {})", r.rank);
        }
        let ranked = rank_discrepant(human.labels(), &r);
        let mut tsv = String::from("#label\tdiscrepancy\n");
        for (l, s) in &ranked {
            tsv.push_str(&format!("{}\t{s}\n", formats::escape_field(l)));
        }
        let report = json!({
            "reference": "human",
            "aligned": "full",
            "concepts": human.len(),
            "disparity": r.disparity,
            "scale": r.scale,
            "rank": r.rank,
            "degenerate": r.degenerate,
            "most_discrepant": ranked.iter().take(20).map(|(l, s)| json!({"label": l, "score": s})).collect::<Vec<_>>(),
        });
        self.put(dir, "discrepancy.tsv", &tsv)?;
        self.put(dir, "report.json", &to_json(&report))
    }

    fn mine(&self, dir: &Path) -> Result<()> {
        let (human, full) = self.load_dissims()?;
        let cfg = MiningConfig {
            n_triplets: self.cfg.mining.n_triplets,
            per_target: self.cfg.mining.per_target,
            seed: self.cfg.seed,
            noise_floor: self.cfg.mining.noise_floor,
            space_a: "human".into(),
            space_b: "full".into(),
        };
        let outcome = mine_triplets(&human, &full, &cfg)?;
        let labels = human.labels();
        for t in &outcome.skipped_targets {
            warn!("mine-triplets: no disagreeing pair for target {:?}", labels[t.index()]);
        }
        if outcome.triplets.len() < cfg.n_triplets {
            warn!(
                "mine-triplets: only {} of {} requested triplets exist",
                outcome.triplets.len(),
                cfg.n_triplets
            );
        }
        let summary = json!({
            "requested": cfg.n_triplets,
            "mined": outcome.triplets.len(),
            "per_target": cfg.per_target,
            "skipped_targets": outcome.skipped_targets.iter().map(|t| &labels[t.index()]).collect::<Vec<_>>(),
        });
        self.put(dir, "triplets.tsv", &formats::triplets_to_string(&outcome.triplets, labels))?;
        self.put(dir, "summary.json", &to_json(&summary))
    }

    fn eval_judgments(&self, dir: &Path) -> Result<()> {
        let (human, full) = self.load_dissims()?;
        let labels = human.labels().to_vec();
        let triplets = formats::load_triplets(&self.out.join(TRIPLETS), &labels)?;
        let responses_path = self.cfg.paths.responses.as_ref().expect("checked in preflight");
        let responses = formats::load_responses(responses_path, triplets.len())?;
        let votes = majority_votes(&responses, triplets.len())?;

        let mut reports: Vec<AgreementReport> = vec![
            agreement("full", &full, &triplets, &votes)?,
            agreement("human", &human, &triplets, &votes)?,
        ];
        if let Some(p) = &self.cfg.paths.word_vectors {
            let table = formats::load_word_vectors(p)?;
            let space = VectorSpace::from_table(&table, &labels);
            if let Some(l) = space.unresolved().first() {
                return Err(normforge_core::Error::Unresolvable(l.to_string()).into());
            }
            reports.push(agreement("word_vectors", &space, &triplets, &votes)?);
        }

        let flags_json = |r: &AgreementReport| -> Vec<&str> { r.flags.iter().map(|f| f.as_str()).collect() };
        let spaces: Vec<Value> = reports
            .iter()
            .map(|r| {
                json!({
                    "space": r.space,
                    "proportion": r.proportion,
                    "k": r.k,
                    "n": r.n,
                    "p_value": r.p_value,
                    "flags": flags_json(r),
                })
            })
            .collect();
        let mut tests = Vec::new();
        for other in &reports[1..] {
            let (x, y): (Vec<f64>, Vec<f64>) = reports[0]
                .flags
                .iter()
                .zip(&other.flags)
                .filter_map(|(a, b)| match (a.counted(), b.counted()) {
                    (Some(a), Some(b)) => Some((a as u8 as f64, b as u8 as f64)),
                    _ => None,
                })
                .unzip();
            let mut t = json!({"a": reports[0].space, "b": other.space, "n": x.len()});
            match paired_t_test(&x, &y) {
                Ok(r) => {
                    t["t"] = json!(r.t);
                    t["df"] = json!(r.df);
                    t["p_value"] = json!(r.p_value);
                }
                Err(e) => t["error"] = json!(e.to_string()),
            }
            tests.push(t);
        }
        let report = json!({
            "triplets": triplets.len(),
            "responses": responses.len(),
            "votes": votes.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
            "spaces": spaces,
            "paired_t_tests": tests,
        });
        self.put(dir, "report.json", &to_json(&report))
    }

    fn tsne(&self, dir: &Path) -> Result<()> {
        let m = formats::load_matrix(&self.out.join(IMPUTED_MATRIX))?;
        let t = &self.cfg.tsne;
        let cfg = TsneConfig {
            perplexity: t.perplexity,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            early_exaggeration: t.early_exaggeration,
            momentum: (t.momentum[0], t.momentum[1]),
            seed: self.cfg.seed,
        };
        let labels: Vec<String> = m.concepts().iter().map(|c| c.label.clone()).collect();
        let mut summary = serde_json::Map::new();
        for v in [View::Full, View::HumanOnly] {
            let r = tsne_embed(&m, v, &cfg)?;
            self.put(dir, &format!("{}.csv", v.name()), &formats::coords_to_csv(&labels, &r.coords)?)?;
            summary.insert(
                v.name().into(),
                json!({"initial_kl": r.initial_kl, "final_kl": r.final_kl}),
            );
        }
        self.put(dir, "summary.json", &to_json(&Value::Object(summary)))
    }
}

/// Imputed cells of `m`, for audits.
pub fn imputed_cells(m: &NormMatrix) -> Vec<(String, String)> {
    m.cells()
        .filter(|(_, _, p)| *p == CellProvenance::AiImputed)
        .map(|(c, f, _)| {
            (
                m.concept(c).expect("valid id").label.clone(),
                m.feature(f).expect("valid id").phrase.clone(),
            )
        })
        .collect()
}
