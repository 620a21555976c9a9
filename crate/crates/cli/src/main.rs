use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use analogykb_cli::config::PipelineConfig;
use analogykb_cli::stages::{self, ApprovedSource, Ctx, RecognitionMethod};
use analogykb_cli::MissingArtifact;
use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "analogykb", version, about = "Build and evaluate an analogy knowledge base")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse KG dumps into canonical triples.
    Ingest {
        #[arg(long)]
        conceptnet: Vec<PathBuf>,
        #[arg(long)]
        wikidata: Vec<PathBuf>,
    },
    /// Embed relation labels and find candidate analogous relations.
    Link {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Ask the LLM which candidates are analogous and filter with both rules.
    LlmFilter {
        /// Transcript to replay (or to record into, for a remote backend).
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Queue pending pairs for review and serve the review API.
    CurateServe {
        #[arg(long)]
        bind: Option<String>,
        /// Built review UI assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// JSONL of {rel_a, rel_b, annotator, verdict} decisions to apply.
        #[arg(long)]
        apply: Option<PathBuf>,
        /// Queue and apply, then exit without serving.
        #[arg(long)]
        no_serve: bool,
    },
    /// Build the KB from triples and reviewed pairs.
    BuildKb {
        /// Decision log to replay (defaults to the curation log in --out).
        #[arg(long, conflicts_with = "approved")]
        decision_log: Option<PathBuf>,
        /// Previously exported approved pairs.
        #[arg(long)]
        approved: Option<PathBuf>,
    },
    /// Print KB counts.
    Stats {
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Generate recognition and generation datasets.
    GenData {
        #[arg(long)]
        kb: Option<PathBuf>,
        /// External benchmark files whose analogies are excluded.
        #[arg(long)]
        exclude: Vec<PathBuf>,
    },
    /// Score predictions or run a recognition baseline.
    Eval {
        #[command(subcommand)]
        task: EvalTask,
    },
    /// Build a few-shot generation prompt from the most similar KB analogies.
    Retrieve {
        #[arg(long)]
        kb: Option<PathBuf>,
        /// "a,b,c" for "a is to b as c is to".
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Link { .. } => "link",
            Command::LlmFilter { .. } => "llm-filter",
            Command::CurateServe { .. } => "curate-serve",
            Command::BuildKb { .. } => "build-kb",
            Command::Stats { .. } => "stats",
            Command::GenData { .. } => "gen-data",
            Command::Eval { .. } => "eval",
            Command::Retrieve { .. } => "retrieve",
        }
    }
}

#[derive(Subcommand)]
enum EvalTask {
    Recognition {
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "offset")]
        method: Method,
        /// Word vectors, "token v1 v2 ..." per line.
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    Generation {
        /// JSONL of {item_id, ranked_outputs}.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Offset,
    Sentence,
}

#[derive(Serialize)]
struct Report<'a, T> {
    stage: &'a str,
    out_dir: &'a std::path::Path,
    summary: T,
}

fn emit_for<T: Serialize>(ctx: &Ctx, stage: &str, summary: T) -> anyhow::Result<()> {
    let report = Report {
        stage,
        out_dir: &ctx.config.out_dir,
        summary,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    match &cli.command {
        Command::Ingest { conceptnet, wikidata } => {
            if !conceptnet.is_empty() || !wikidata.is_empty() {
                config.sources.conceptnet = conceptnet.clone();
                config.sources.wikidata = wikidata.clone();
            }
        }
        Command::Link { k: Some(k) } => config.link.candidate_k = *k,
        Command::LlmFilter { transcript: Some(t) } => config.llm.transcript = Some(t.clone()),
        Command::CurateServe { bind, static_dir, .. } => {
            if let Some(b) = bind {
                config.curation.bind = b.clone();
            }
            if let Some(d) = static_dir {
                config.curation.static_dir = Some(d.clone());
            }
        }
        Command::GenData { exclude, .. } if !exclude.is_empty() => {
            config.dataset.external = exclude.clone();
        }
        Command::Retrieve { k: Some(k), .. } => config.eval.retrieval_k = *k,
        _ => {}
    }
    let ctx = Ctx::new(config)?;
    let kb_dir = |kb: &Option<PathBuf>| kb.clone().unwrap_or_else(|| ctx.out(stages::KB_DIR));
    let stage = cli.command.name();
    macro_rules! emit {
        ($summary:expr) => {
            emit_for(&ctx, stage, $summary)
        };
    }

    match cli.command {
        Command::Ingest { .. } => emit!(&stages::ingest(&ctx)?),
        Command::Link { .. } => emit!(&stages::link(&ctx)?),
        Command::LlmFilter { .. } => emit!(&stages::llm_filter(&ctx)?),
        Command::CurateServe { apply, no_serve, .. } => {
            let (setup, summary) = stages::curate_batch(&ctx, apply.as_deref())?;
            emit!(&summary)?;
            if no_serve {
                return Ok(());
            }
            let addr: SocketAddr = ctx
                .config
                .curation
                .bind
                .parse()
                .with_context(|| format!("curate-serve: bad bind address {:?}", ctx.config.curation.bind))?;
            let state = analogykb_server::AppState::new(setup.store, setup.kb, setup.candidates);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(analogykb_server::serve(addr, state, ctx.config.curation.static_dir.clone()))?;
            Ok(())
        }
        Command::BuildKb { decision_log, approved } => {
            let source = match (approved, decision_log) {
                (Some(path), _) => ApprovedSource::Approved(path),
                (None, Some(path)) => ApprovedSource::DecisionLog(path),
                (None, None) => ApprovedSource::DecisionLog(ctx.out(stages::DECISION_LOG_FILE)),
            };
            let summary = stages::build_kb(&ctx, source)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            emit!(&summary)
        }
        Command::Stats { kb } => emit!(&stages::stats(&ctx, &kb_dir(&kb))?),
        Command::GenData { kb, .. } => emit!(&stages::gen_data(&ctx, &kb_dir(&kb))?),
        Command::Eval { task } => match task {
            EvalTask::Recognition { items, method, vectors } => {
                let items = items.unwrap_or_else(|| ctx.out(stages::MCQA_FILE));
                let method = match method {
                    Method::Offset => RecognitionMethod::Offset,
                    Method::Sentence => RecognitionMethod::Sentence,
                };
                let report = stages::eval_recognition(&ctx, &items, method, vectors.as_deref())?;
                eprint!("{report}");
                emit!(&report)
            }
            EvalTask::Generation { predictions, gold } => {
                let gold = gold.unwrap_or_else(|| ctx.out(stages::GEN_FILE));
                let report = stages::eval_generation(&ctx, &predictions, &gold)?;
                eprint!("{}", report.report);
                emit!(&report)
            }
        },
        Command::Retrieve { kb, query, .. } => {
            let parts: Vec<&str> = query.split(',').map(str::trim).collect();
            let [a, b, c] = parts[..] else {
                anyhow::bail!("retrieve: --query takes three comma-separated concepts");
            };
            let k = ctx.config.eval.retrieval_k;
            emit!(&stages::retrieve(&ctx, &kb_dir(&kb), (a, b, c), k)?)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingArtifact>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
