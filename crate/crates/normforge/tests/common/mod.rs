#![allow(dead_code)]

use std::path::{Path, PathBuf};

use normforge::config::PipelineConfig;
use normforge::mock::{self, ChatScript, ChatState, EmbedState, FailurePlan, MockServer};

pub const EMBED_DIM: usize = 16;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

pub struct Mocks {
    pub chat: MockServer<ChatState>,
    pub embed: MockServer<EmbedState>,
}

impl Mocks {
    pub async fn start() -> Self {
        Self::with_failures(FailurePlan::default()).await
    }

    pub async fn with_failures(plan: FailurePlan) -> Self {
        let script = ChatScript::load(&fixture("chat_script.tsv"), "no").unwrap();
        let aliases = EmbedState::load_aliases(&fixture("aliases.tsv")).unwrap();
        let chat = mock::spawn_chat(script, plan, mock::localhost()).await.unwrap();
        let embed = mock::spawn_embeddings(EmbedState::new(EMBED_DIM, aliases), mock::localhost())
            .await
            .unwrap();
        Self { chat, embed }
    }

    /// The fixture configuration pointed at these mocks and `out`.
    pub fn config(&self, out: &Path) -> PipelineConfig {
        let text = std::fs::read_to_string(fixture("config.toml")).unwrap();
        self.config_from(&text, out)
    }

    pub fn config_from(&self, text: &str, out: &Path) -> PipelineConfig {
        let chat = self.chat.base_url();
        let embed = self.embed.base_url();
        let out = out.display().to_string();
        PipelineConfig::parse(text, &fixtures(), |k| match k {
            "CHAT_URL" => Some(chat.clone()),
            "EMBED_URL" => Some(embed.clone()),
            "NORMFORGE_OUT" => Some(out.clone()),
            _ => None,
        })
        .unwrap()
    }
}

/// Every regular file under `root` with its contents, by relative path.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs the reduce stage into `out` and loads the reduced matrix.
pub async fn reduced_matrix(mocks: &Mocks, out: &Path) -> normforge_core::NormMatrix {
    use normforge::pipeline::{Pipeline, StageName, REDUCED_MATRIX};
    Pipeline::new(mocks.config(out))
        .run(&[StageName::Reduce])
        .await
        .unwrap();
    normforge::formats::load_matrix(&out.join(REDUCED_MATRIX)).unwrap()
}

/// The configured screener/checker cascade.
pub fn cascade(cfg: &PipelineConfig) -> normforge::cascade::Cascade {
    use normforge::cascade::{Cascade, Stage};
    use normforge::clients::ChatClient;
    let cc = cfg.cascade.as_ref().unwrap();
    let stage = |s: &normforge::config::StageConfig| Stage {
        client: ChatClient::new(s.endpoint(), cfg.http.clone()).unwrap(),
        template: cfg.template(s.mode().unwrap()).unwrap(),
    };
    Cascade {
        stage1: stage(&cc.stage1),
        stage2: stage(&cc.stage2),
    }
}

/// `(concept, feature)` lines of a two-column fixture file.
pub fn pairs_file(name: &str) -> std::collections::BTreeSet<(String, String)> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (c, f) = l.split_once('\t').unwrap();
            (c.to_string(), f.to_string())
        })
        .collect()
}
