//! Pipeline configuration (TOML).
//!
//! String values may reference environment variables as `${NAME}`; an
//! unset variable is an error. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use normforge_core::verifier::{default_exemplars, Exemplar, PromptMode, PromptTemplate};
use serde::{Deserialize, Serialize};

use crate::clients::{Endpoint, HttpSettings};
use crate::error::{Error, Result};
use crate::formats::read_text;
use crate::service::AssignmentPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub elicitation: PathBuf,
    #[serde(default)]
    pub judgments: Option<PathBuf>,
    #[serde(default)]
    pub word_vectors: Option<PathBuf>,
    #[serde(default)]
    pub responses: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
}

impl EndpointConfig {
    pub fn endpoint(&self) -> Endpoint {
        Endpoint {
            url: self.url.clone(),
            model: self.model.clone(),
            api_key: self.api_key.clone().filter(|k| !k.is_empty()),
            id: self.id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    64
}

impl EmbeddingConfig {
    pub fn endpoint(&self) -> Endpoint {
        EndpointConfig {
            url: self.url.clone(),
            model: self.model.clone(),
            api_key: self.api_key.clone(),
            id: self.id.clone(),
        }
        .endpoint()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReduceConfig {
    pub merge_threshold: f64,
    /// Features to keep after merging; all of them when unset.
    pub sample_size: Option<usize>,
    pub min_producers: usize,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            merge_threshold: 0.1,
            sample_size: None,
            min_producers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_mode() -> String {
    "2shot".into()
}

impl StageConfig {
    pub fn endpoint(&self) -> Endpoint {
        EndpointConfig {
            url: self.url.clone(),
            model: self.model.clone(),
            api_key: self.api_key.clone(),
            id: self.id.clone(),
        }
        .endpoint()
    }

    pub fn mode(&self) -> Result<PromptMode> {
        PromptMode::parse(&self.mode)
            .ok_or_else(|| Error::Config(format!("unknown prompt mode {:?}", self.mode)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub name: String,
    #[serde(flatten)]
    pub stage: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub min_judgments: u32,
    pub bootstrap: usize,
    pub max_parallel: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            min_judgments: 5,
            bootstrap: 1_000,
            max_parallel: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarConfig {
    pub concept: String,
    pub feature: String,
    pub answer: bool,
}

fn default_exemplar_config() -> Vec<ExemplarConfig> {
    default_exemplars()
        .into_iter()
        .map(|e| ExemplarConfig {
            concept: e.concept,
            feature: e.feature,
            answer: e.answer,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_every: usize,
}

fn default_parallel() -> usize {
    8
}

fn default_checkpoint() -> usize {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningSection {
    pub n_triplets: usize,
    pub per_target: usize,
    pub noise_floor: f64,
}

impl Default for MiningSection {
    fn default() -> Self {
        Self {
            n_triplets: 1_424,
            per_target: 2,
            noise_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneSection {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub momentum: [f64; 2],
}

impl Default for TsneSection {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1_000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            momentum: [0.5, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub verification_pairs: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub verification_batch: usize,
    pub triadic_batch: usize,
    pub verification_target: Option<usize>,
    pub triadic_target: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let p = AssignmentPolicy::default();
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("experiment-data"),
            static_dir: None,
            verification_pairs: None,
            triplets: None,
            verification_batch: p.verification_batch,
            triadic_batch: p.triadic_batch,
            verification_target: p.verification_target,
            triadic_target: p.triadic_target,
        }
    }
}

impl ServeConfig {
    pub fn policy(&self, seed: u64) -> AssignmentPolicy {
        AssignmentPolicy {
            verification_batch: self.verification_batch,
            triadic_batch: self.triadic_batch,
            verification_target: self.verification_target,
            triadic_target: self.triadic_target,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub http: HttpSettings,
    #[serde(default)]
    pub embedding: Option<EmbeddingConfig>,
    #[serde(default)]
    pub reduce: ReduceConfig,
    #[serde(default)]
    pub verifiers: Vec<VerifierConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_exemplar_config")]
    pub exemplars: Vec<ExemplarConfig>,
    #[serde(default)]
    pub cascade: Option<CascadeConfig>,
    #[serde(default)]
    pub mining: MiningSection,
    #[serde(default)]
    pub tsne: TsneSection,
    #[serde(default)]
    pub serve: ServeConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, |k| std::env::var(k).ok())
    }

    /// Parses config text, resolving `${NAME}` through `env` and relative
    /// paths against `base`.
    pub fn parse(text: &str, base: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        interpolate(&mut value, &env)?;
        let mut cfg: PipelineConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.elicitation);
        fix(&mut self.paths.out);
        for p in [
            &mut self.paths.judgments,
            &mut self.paths.word_vectors,
            &mut self.paths.responses,
            &mut self.serve.static_dir,
            &mut self.serve.verification_pairs,
            &mut self.serve.triplets,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.serve.data_dir);
    }

    fn validate(&self) -> Result<()> {
        if !(self.reduce.merge_threshold > 0.0 && self.reduce.merge_threshold < 1.0) {
            return Err(Error::Config("reduce.merge_threshold must lie in (0, 1)".into()));
        }
        if self.exemplars.len() != 2 {
            return Err(Error::Config("exactly two exemplars are required".into()));
        }
        self.template(PromptMode::TwoShot)?;
        for v in &self.verifiers {
            v.stage.mode()?;
        }
        if let Some(c) = &self.cascade {
            c.stage1.mode()?;
            c.stage2.mode()?;
        }
        let mut names: Vec<&str> = self.verifiers.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("verifier names must be unique".into()));
        }
        Ok(())
    }

    pub fn exemplars(&self) -> [Exemplar; 2] {
        let e = |x: &ExemplarConfig| Exemplar::new(&x.concept, &x.feature, x.answer);
        [e(&self.exemplars[0]), e(&self.exemplars[1])]
    }

    pub fn template(&self, mode: PromptMode) -> Result<PromptTemplate> {
        Ok(PromptTemplate::for_mode(mode, self.exemplars())?)
    }
}

fn interpolate(v: &mut toml::Value, env: &impl Fn(&str) -> Option<String>) -> Result<()> {
    match v {
        toml::Value::String(s) => {
            if s.contains("${") {
                *s = expand(s, env)?;
            }
        }
        toml::Value::Array(a) => {
            for x in a {
                interpolate(x, env)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, x) in t.iter_mut() {
                interpolate(x, env)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn expand(s: &str, env: &impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated ${{ in {s:?}")))?;
        let name = &after[..end];
        let value = env(name)
            .ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
