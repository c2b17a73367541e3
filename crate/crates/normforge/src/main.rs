use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use normforge::config::PipelineConfig;
use normforge::mock::{self, ChatScript, EmbedState, FailurePlan};
use normforge::pipeline::{Pipeline, StageName, StageStatus};
use normforge::service::{self, AssignmentPolicy, Service};
use normforge::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "normforge", version, about = "Build, impute and evaluate semantic feature norms")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, env = "NORMFORGE_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the configured seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum concurrent requests per endpoint.
    #[arg(long, global = true)]
    max_parallel: Option<usize>,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the concept-feature matrix and merge near-synonymous features.
    Reduce,
    /// Score verifier models against gold human judgments.
    EvalVerifiers,
    /// Fill absent cells with the two-stage verifier cascade.
    Impute,
    /// Density and overlap statistics for both matrix views.
    Stats,
    /// Concept dissimilarity matrices for both views.
    Dissim,
    /// Align the full space onto the human space.
    Procrustes,
    /// Mine triplets on which the two spaces disagree.
    MineTriplets,
    /// Compare each space with collected triadic judgments.
    EvalJudgments,
    /// Two-dimensional embeddings of both views.
    Tsne,
    /// Run every configured stage in order.
    Run,
    /// Serve the judgment-collection API and static frontend.
    Serve {
        #[arg(long, env = "NORMFORGE_BIND")]
        bind: Option<String>,
        #[arg(long, env = "NORMFORGE_DATA_DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, env = "NORMFORGE_STATIC_DIR")]
        static_dir: Option<PathBuf>,
        /// Verification items, one `concept<TAB>feature` per line.
        #[arg(long, env = "NORMFORGE_VERIFICATION_PAIRS")]
        verification_pairs: Option<PathBuf>,
        /// Triplet file written by mine-triplets.
        #[arg(long, env = "NORMFORGE_TRIPLETS")]
        triplets: Option<PathBuf>,
    },
    /// Local stand-ins for the chat and embedding endpoints.
    MockServer {
        /// Scripted answers, `model<TAB>concept<TAB>feature<TAB>answer` per line.
        #[arg(long)]
        chat_script: Option<PathBuf>,
        /// Answer for pairs the script does not cover.
        #[arg(long, default_value = "no")]
        default_answer: String,
        /// Phrase aliases, `phrase<TAB>alias` per line.
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value = "127.0.0.1:0")]
        chat_bind: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:0")]
        embed_bind: SocketAddr,
    },
}

impl Command {
    fn stage(&self) -> Option<StageName> {
        Some(match self {
            Command::Reduce => StageName::Reduce,
            Command::EvalVerifiers => StageName::EvalVerifiers,
            Command::Impute => StageName::Impute,
            Command::Stats => StageName::Stats,
            Command::Dissim => StageName::Dissim,
            Command::Procrustes => StageName::Procrustes,
            Command::MineTriplets => StageName::MineTriplets,
            Command::EvalJudgments => StageName::EvalJudgments,
            Command::Tsne => StageName::Tsne,
            _ => return None,
        })
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("no configuration file given (use --config)".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if let Some(n) = cli.max_parallel {
        if n == 0 {
            return Err(Error::Config("--max-parallel must be at least 1".into()));
        }
        cfg.evaluation.max_parallel = n;
        if let Some(c) = cfg.cascade.as_mut() {
            c.max_parallel = n;
        }
    }
    Ok(cfg)
}

async fn run_stages(cli: &Cli, stages: Option<Vec<StageName>>) -> Result<()> {
    let cfg = load_config(cli)?;
    let pipeline = Pipeline::new(cfg).with_force(cli.force);
    let stages = stages.unwrap_or_else(|| pipeline.full_run());
    let done = pipeline.run(&stages).await?;
    let report: Vec<_> = done
        .iter()
        .map(|(s, st)| {
            let status = match st {
                StageStatus::Ran => "ran",
                StageStatus::UpToDate => "up_to_date",
            };
            json!({"stage": s.as_str(), "status": status})
        })
        .collect();
    println!("{}", json!({ "stages": report }));
    Ok(())
}

async fn serve(
    cli: &Cli,
    bind: Option<String>,
    data_dir: Option<PathBuf>,
    static_dir: Option<PathBuf>,
    verification_pairs: Option<PathBuf>,
    triplets: Option<PathBuf>,
) -> Result<()> {
    let (mut sc, seed) = match &cli.config {
        Some(_) => {
            let c = load_config(cli)?;
            (c.serve, c.seed)
        }
        None => (Default::default(), cli.seed.unwrap_or(0)),
    };
    if let Some(b) = bind {
        sc.bind = b;
    }
    if let Some(d) = data_dir {
        sc.data_dir = d;
    }
    sc.static_dir = static_dir.or(sc.static_dir);
    sc.verification_pairs = verification_pairs.or(sc.verification_pairs);
    sc.triplets = triplets.or(sc.triplets);
    let policy: AssignmentPolicy = sc.policy(seed);
    let pool = service::load_pool(sc.verification_pairs.as_deref(), sc.triplets.as_deref(), None)?;
    let svc = Arc::new(Service::open(&sc.data_dir, pool, policy)?);
    let app = service::router(svc, sc.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(&sc.bind)
        .await
        .map_err(|e| Error::Config(format!("bind {}: {e}", sc.bind)))?;
    let addr = listener.local_addr().map_err(|e| Error::Config(e.to_string()))?;
    log::info!("serving on http://{addr}");
    println!("{}", json!({ "listening": format!("http://{addr}") }));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(&sc.data_dir, e))
}

async fn mock_server(
    chat_script: Option<PathBuf>,
    default_answer: String,
    aliases: Option<PathBuf>,
    dim: usize,
    chat_bind: SocketAddr,
    embed_bind: SocketAddr,
) -> Result<()> {
    let script = match chat_script {
        Some(p) => ChatScript::load(&p, &default_answer)?,
        None => ChatScript::new(default_answer),
    };
    let aliases = match aliases {
        Some(p) => EmbedState::load_aliases(&p)?,
        None => Default::default(),
    };
    let chat = mock::spawn_chat(script, FailurePlan::default(), chat_bind).await?;
    let embed = mock::spawn_embeddings(EmbedState::new(dim, aliases), embed_bind).await?;
    println!(
        "{}",
        json!({"chat": chat.base_url(), "embeddings": embed.base_url()})
    );
    let _ = tokio::signal::ctrl_c().await;
    chat.stop().await;
    embed.stop().await;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::MissingInput { .. } => 2,
        _ => 1,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run => run_stages(&cli, None).await,
        Command::Serve {
            bind,
            data_dir,
            static_dir,
            verification_pairs,
            triplets,
        } => {
            serve(
                &cli,
                bind.clone(),
                data_dir.clone(),
                static_dir.clone(),
                verification_pairs.clone(),
                triplets.clone(),
            )
            .await
        }
        Command::MockServer {
            chat_script,
            default_answer,
            aliases,
            dim,
            chat_bind,
            embed_bind,
        } => {
            mock_server(
                chat_script.clone(),
                default_answer.clone(),
                aliases.clone(),
                *dim,
                *chat_bind,
                *embed_bind,
            )
            .await
        }
        c => run_stages(&cli, Some(vec![c.stage().expect("stage command")])).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{report}");
            ExitCode::from(exit_code(&e))
        }
    }
}
