//! One function per pipeline stage. Stages talk to each other only through
//! files in the output directory.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use analogykb::curation::{CurationStore, ReviewStats, Verdict};
use analogykb::dataset::{
    compute_overlap, exclude_overlap, load_external, make_generation_dataset,
    make_recognition_dataset, GenItem, McqaItem, OverlapReport,
};
use analogykb::embed::{embed_texts, EmbeddingCache};
use analogykb::eval::{
    evaluate_generation, evaluate_recognition, hit_at_k, mrr_within, offset_predict,
    retrieve_topk_analogies, sentence_predict, AnalogyIndex, FewShotPrompt, GenerationReport,
    RankedPrediction, RecognitionReport, WordVectors,
};
use analogykb::filter::{run_filter, Exemplars, Funnel};
use analogykb::ingest::{open_dump, parse_conceptnet, parse_wikidata, read_triples, write_triples, IngestReport, RawTriple};
use analogykb::kb::{pair_key, AnalogousRelationPair, AnalogyKind, BuildInfo, Kb, KbStats, RelationId};
use analogykb::linker::{self, CandidateSet, RelationIndex};
use analogykb::jsonl;
use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

pub const TRIPLES_FILE: &str = "triples.jsonl";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const METAS_FILE: &str = "meta_relations.jsonl";
pub const PENDING_FILE: &str = "pending_pairs.jsonl";
pub const FUNNEL_FILE: &str = "funnel.json";
pub const DECISION_LOG_FILE: &str = "decisions.jsonl";
pub const APPROVED_FILE: &str = "approved_pairs.jsonl";
pub const KB_DIR: &str = "kb";
pub const KB_STATS_FILE: &str = "kb_stats.json";
pub const MCQA_FILE: &str = "mcqa.jsonl";
pub const GEN_FILE: &str = "generation.jsonl";
pub const GEN_DATA_REPORT_FILE: &str = "gen_data_report.json";
pub const RETRIEVAL_FILE: &str = "retrieval.json";

/// A stage was started before the stage that produces its input.
#[derive(Debug)]
pub struct MissingArtifact {
    pub stage: &'static str,
    pub path: PathBuf,
    pub producer: &'static str,
}

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: missing input {} (produced by `{}`)",
            self.stage,
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingArtifact {}

fn require(stage: &'static str, path: &Path, producer: &'static str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingArtifact {
            stage,
            path: path.to_path_buf(),
            producer,
        }
        .into())
    }
}

/// RFC 3339 time, pinned by `SOURCE_DATE_EPOCH` when set so reruns are
/// byte-identical.
pub fn timestamp() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    pinned
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Stage context: resolved config and output directory.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub config: PipelineConfig,
}

impl Ctx {
    pub fn new(config: PipelineConfig) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&config.out_dir)
            .with_context(|| format!("creating {}", config.out_dir.display()))?;
        config.write_snapshot(&config.out_dir)?;
        Ok(Self { config })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub conceptnet: IngestReport,
    pub wikidata: IngestReport,
    pub triples: usize,
}

pub fn ingest(ctx: &Ctx) -> anyhow::Result<IngestSummary> {
    let cfg = &ctx.config;
    if cfg.sources.conceptnet.is_empty() && cfg.sources.wikidata.is_empty() {
        bail!("ingest: no sources configured (set [sources] or pass --conceptnet/--wikidata)");
    }
    let mut triples: Vec<RawTriple> = Vec::new();
    let mut cn_report = IngestReport::default();
    let opts = cfg.ingest.conceptnet_options();
    for path in &cfg.sources.conceptnet {
        require("ingest", path, "a ConceptNet dump")?;
        let (t, r) = parse_conceptnet(open_dump(path)?, &opts)
            .with_context(|| format!("parsing {}", path.display()))?;
        cn_report.merge(&r);
        triples.extend(t);
    }
    let mut wd_report = IngestReport::default();
    for path in &cfg.sources.wikidata {
        require("ingest", path, "a Wikidata slice")?;
        let (t, r) = parse_wikidata(open_dump(path)?, cfg.ingest.wikidata_popularity)
            .with_context(|| format!("parsing {}", path.display()))?;
        wd_report.merge(&r);
        triples.extend(t);
    }
    write_triples(&ctx.out(TRIPLES_FILE), &triples)?;
    let summary = IngestSummary {
        conceptnet: cn_report,
        wikidata: wd_report,
        triples: triples.len(),
    };
    jsonl::write_json(&ctx.out(INGEST_REPORT_FILE), &summary)?;
    Ok(summary)
}

fn load_triples(ctx: &Ctx, stage: &'static str) -> anyhow::Result<Vec<RawTriple>> {
    let path = ctx.out(TRIPLES_FILE);
    require(stage, &path, "ingest")?;
    Ok(read_triples(&path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSummary {
    pub relations: usize,
    pub candidate_k: usize,
    pub provider: String,
    /// Relations embedded with aliases appended.
    pub aliased: usize,
}

pub fn link(ctx: &Ctx) -> anyhow::Result<LinkSummary> {
    let cfg = &ctx.config;
    let triples = load_triples(ctx, "link")?;
    let kb = Kb::build(&triples, &[])?;
    let ids: Vec<RelationId> = kb.relations().map(|r| r.id.clone()).collect();
    let aliases = match &cfg.link.aliases {
        Some(path) => {
            require("link", path, "an alias file")?;
            linker::load_aliases(path)?
        }
        None => Default::default(),
    };
    let labels: Vec<String> = kb.relations().map(|r| linker::relation_text(&r.label, &aliases)).collect();
    let provider = cfg.embedding.provider();
    let cache = cfg.embedding.cache_dir.as_ref().map(EmbeddingCache::new);
    let vectors = embed_texts(&labels, provider.as_ref(), cache.as_ref(), &cfg.embedding.options())?;
    let index = RelationIndex::new(
        ids.into_iter()
            .zip(&labels)
            .map(|(id, label)| (id, vectors[label].clone())),
    )?;
    let sets = index.all_candidates(cfg.link.candidate_k)?;
    jsonl::write(&ctx.out(CANDIDATES_FILE), &sets)?;
    Ok(LinkSummary {
        relations: index.len(),
        candidate_k: cfg.link.candidate_k,
        provider: provider.id(),
        aliased: kb.relations().filter(|r| aliases.contains_key(&r.label.to_lowercase())).count(),
    })
}

fn load_candidates(ctx: &Ctx, stage: &'static str) -> anyhow::Result<Vec<CandidateSet>> {
    let path = ctx.out(CANDIDATES_FILE);
    require(stage, &path, "link")?;
    Ok(jsonl::read(&path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSummary {
    pub model: String,
    pub prompts: usize,
    pub funnel: Funnel,
}

pub fn llm_filter(ctx: &Ctx) -> anyhow::Result<FilterSummary> {
    let cfg = &ctx.config;
    let sets = load_candidates(ctx, "llm-filter")?;
    if let Some(t) = &cfg.llm.transcript {
        if cfg.llm.kind == analogykb::llm::BackendKind::Replay {
            require("llm-filter", t, "a recorded LLM session")?;
        }
    }
    let backend = cfg.llm.build()?;
    let exemplars = if cfg.filter.zero_shot {
        Exemplars::zero_shot()
    } else {
        Exemplars::default()
    };
    let out = run_filter(&sets, backend.as_ref(), &exemplars, cfg.filter.max_in_flight)?;
    jsonl::write(&ctx.out(SELECTIONS_FILE), &out.selections)?;
    jsonl::write(&ctx.out(METAS_FILE), &out.metas)?;
    jsonl::write(&ctx.out(PENDING_FILE), &out.pending)?;
    jsonl::write_json(&ctx.out(FUNNEL_FILE), &out.funnel)?;
    Ok(FilterSummary {
        model: backend.model().to_string(),
        prompts: out.selections.len() + out.metas.len(),
        funnel: out.funnel,
    })
}

/// A scripted review decision addressed by relation pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedVerdict {
    pub rel_a: RelationId,
    pub rel_b: RelationId,
    pub annotator: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub note: Option<String>,
}

/// Curation inputs loaded from the earlier stages.
pub struct CurationSetup {
    pub store: CurationStore,
    pub kb: Kb,
    pub candidates: Vec<CandidateSet>,
    pub enqueued: usize,
}

fn clock() -> String {
    timestamp()
}

/// Opens the decision log and queues every pending pair not yet queued.
pub fn open_curation(ctx: &Ctx) -> anyhow::Result<CurationSetup> {
    let triples = load_triples(ctx, "curate-serve")?;
    let candidates = load_candidates(ctx, "curate-serve")?;
    let pending_path = ctx.out(PENDING_FILE);
    require("curate-serve", &pending_path, "llm-filter")?;
    let pending: Vec<AnalogousRelationPair> = jsonl::read(&pending_path)?;
    let kb = Kb::build(&triples, &[])?;
    if ctx.config.curation.annotators.is_empty() {
        bail!("curate-serve: no annotators configured");
    }
    let mut store = CurationStore::new(ctx.config.curation.annotators.iter().cloned(), &candidates)
        .with_clock(clock)
        .open(&ctx.out(DECISION_LOG_FILE))?;
    let enqueued = store.enqueue(&pending, &kb)?.len();
    Ok(CurationSetup {
        store,
        kb,
        candidates,
        enqueued,
    })
}

/// Applies scripted verdicts; unknown pairs are an error.
pub fn apply_verdicts(store: &mut CurationStore, verdicts: &[ScriptedVerdict]) -> anyhow::Result<usize> {
    let ids: HashMap<(RelationId, RelationId), u64> = store
        .items()
        .map(|i| ((i.pair.rel_a.clone(), i.pair.rel_b.clone()), i.id))
        .collect();
    for v in verdicts {
        let key = pair_key(&v.rel_a, &v.rel_b);
        let id = *ids
            .get(&key)
            .ok_or_else(|| anyhow!("{} ~ {} is not in the review queue", key.0, key.1))?;
        store.submit_decision(id, &v.annotator, v.verdict, v.note.clone())?;
    }
    Ok(verdicts.len())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationSummary {
    pub enqueued: usize,
    pub applied: usize,
    pub stats: ReviewStats,
}

/// Non-serving part of `curate-serve`: queue, apply scripted verdicts,
/// report.
pub fn curate_batch(ctx: &Ctx, verdicts: Option<&Path>) -> anyhow::Result<(CurationSetup, CurationSummary)> {
    let mut setup = open_curation(ctx)?;
    let applied = match verdicts {
        Some(path) => {
            require("curate-serve", path, "a verdicts file")?;
            let v: Vec<ScriptedVerdict> = jsonl::read(path)?;
            apply_verdicts(&mut setup.store, &v)?
        }
        None => 0,
    };
    let summary = CurationSummary {
        enqueued: setup.enqueued,
        applied,
        stats: setup.store.stats(),
    };
    Ok((setup, summary))
}

/// Where `build-kb` takes approved pairs from.
#[derive(Debug, Clone)]
pub enum ApprovedSource {
    DecisionLog(PathBuf),
    Approved(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildSummary {
    pub stats: KbStats,
    pub warnings: Vec<String>,
}

pub fn build_kb(ctx: &Ctx, approved: ApprovedSource) -> anyhow::Result<BuildSummary> {
    let triples_path = ctx.out(TRIPLES_FILE);
    let triples = load_triples(ctx, "build-kb")?;
    let mut warnings = Vec::new();
    let (pairs, source_path): (Vec<AnalogousRelationPair>, Option<PathBuf>) = match approved {
        ApprovedSource::Approved(path) => {
            require("build-kb", &path, "an approved-pairs export")?;
            (jsonl::read(&path)?, Some(path))
        }
        ApprovedSource::DecisionLog(path) if path.exists() => {
            let candidates = load_candidates(ctx, "build-kb").unwrap_or_default();
            let store = CurationStore::new(ctx.config.curation.annotators.iter().cloned(), &candidates)
                .replay(jsonl::read(&path)?)?;
            (store.export_approved(), Some(path))
        }
        ApprovedSource::DecisionLog(path) => {
            warnings.push(format!("no decision log at {}; no pairs approved yet", path.display()));
            (Vec::new(), None)
        }
    };
    let approved_count = pairs
        .iter()
        .filter(|p| p.status == analogykb::kb::PairStatus::Approved)
        .count();
    if approved_count == 0 && warnings.is_empty() {
        warnings.push("no approved analogous relation pairs; only same-relation analogies are derivable".into());
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    jsonl::write(&ctx.out(APPROVED_FILE), &pairs)?;
    let kb = Kb::build(&triples, &pairs)?;
    let mut inputs = vec![triples_path];
    inputs.extend(source_path);
    let info = BuildInfo::with_sources(timestamp(), &inputs)?;
    kb.save(&ctx.out(KB_DIR), &info)?;
    Ok(BuildSummary {
        stats: kb.stats(),
        warnings,
    })
}

pub fn load_kb(stage: &'static str, dir: &Path) -> anyhow::Result<Kb> {
    require(stage, &dir.join(analogykb::kb::MANIFEST_FILE), "build-kb")?;
    Kb::load(dir).with_context(|| format!("{stage}: loading KB from {}", dir.display()))
}

pub fn stats(ctx: &Ctx, kb_dir: &Path) -> anyhow::Result<KbStats> {
    let kb = load_kb("stats", kb_dir)?;
    let stats = kb.stats();
    jsonl::write_json(&ctx.out(KB_STATS_FILE), &stats)?;
    Ok(stats)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub mcqa_items: usize,
    pub mcqa_skipped_queries: usize,
    pub mcqa_short: bool,
    pub generation_items: usize,
    pub generation_short: bool,
    pub excluded: usize,
    /// Keyed by external file name.
    pub overlap: BTreeMap<String, OverlapSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub rate: f64,
    pub total: usize,
    pub overlapping: usize,
    pub malformed_lines: usize,
}

impl OverlapSummary {
    fn new(r: &OverlapReport, malformed: usize) -> Self {
        Self {
            rate: r.rate,
            total: r.total,
            overlapping: r.overlapping.len(),
            malformed_lines: malformed,
        }
    }
}

pub fn gen_data(ctx: &Ctx, kb_dir: &Path) -> anyhow::Result<GenDataSummary> {
    let cfg = &ctx.config;
    let kb = load_kb("gen-data", kb_dir)?;
    let seed = cfg.seed;
    let rec = make_recognition_dataset(&kb, cfg.dataset.n_same, cfg.dataset.n_analogous, seed)?;
    let gen = make_generation_dataset(&kb, cfg.dataset.n_generation, seed.wrapping_add(1));

    let mut external = Vec::new();
    let mut overlap = BTreeMap::new();
    for path in &cfg.dataset.external {
        require("gen-data", path, "an external benchmark file")?;
        let (items, malformed) = load_external(path)?;
        if !items.is_empty() {
            let report = compute_overlap(&kb, &items)?;
            let name = path.file_name().map_or_else(
                || path.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            overlap.insert(name, OverlapSummary::new(&report, malformed));
        }
        external.extend(items);
    }
    let before = rec.items.len() + gen.items.len();
    let mcqa: Vec<McqaItem> = exclude_overlap(rec.items, &external);
    let generation: Vec<GenItem> = exclude_overlap(gen.items, &external);
    let excluded = before - mcqa.len() - generation.len();

    jsonl::write(&ctx.out(MCQA_FILE), &mcqa)?;
    jsonl::write(&ctx.out(GEN_FILE), &generation)?;
    let summary = GenDataSummary {
        mcqa_items: mcqa.len(),
        mcqa_skipped_queries: rec.skipped,
        mcqa_short: rec.short,
        generation_items: generation.len(),
        generation_short: gen.short,
        excluded,
        overlap,
    };
    jsonl::write_json(&ctx.out(GEN_DATA_REPORT_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionMethod {
    Offset,
    Sentence,
}

pub fn eval_recognition(
    ctx: &Ctx,
    items_path: &Path,
    method: RecognitionMethod,
    vectors: Option<&Path>,
) -> anyhow::Result<RecognitionReport> {
    require("eval", items_path, "gen-data")?;
    let items: Vec<McqaItem> = jsonl::read(items_path)?;
    let report = match method {
        RecognitionMethod::Offset => {
            let path = vectors.ok_or_else(|| anyhow!("eval: the offset baseline needs --vectors"))?;
            require("eval", path, "a word-vector file")?;
            let wv = WordVectors::load(path)?;
            evaluate_recognition("offset", &items, |i| offset_predict(i, &wv))
        }
        RecognitionMethod::Sentence => {
            let enc = ctx.config.embedding.hashed();
            evaluate_recognition("sentence", &items, |i| sentence_predict(i, &enc))
        }
    };
    jsonl::write_json(&ctx.out("eval_recognition.json"), &report)?;
    std::fs::write(ctx.out("eval_recognition.txt"), report.to_string())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationEval {
    #[serde(flatten)]
    pub report: GenerationReport,
    pub mrr_window: usize,
    pub missing_predictions: Vec<String>,
}

pub fn eval_generation(ctx: &Ctx, predictions: &Path, gold_path: &Path) -> anyhow::Result<GenerationEval> {
    require("eval", predictions, "a model run")?;
    require("eval", gold_path, "gen-data")?;
    let preds: Vec<RankedPrediction> = jsonl::read(predictions)?;
    let gold_items: Vec<GenItem> = jsonl::read(gold_path)?;
    let by_id: HashMap<&str, &RankedPrediction> = preds.iter().map(|p| (p.item_id.as_str(), p)).collect();
    let mut aligned = Vec::new();
    let mut gold = Vec::new();
    let mut missing = Vec::new();
    for item in &gold_items {
        match by_id.get(item.id.as_str()) {
            Some(p) => {
                aligned.push((*p).clone());
                gold.push(item.d.clone());
            }
            // an absent prediction ranks nothing, so it scores zero
            None => {
                missing.push(item.id.clone());
                aligned.push(RankedPrediction {
                    item_id: item.id.clone(),
                    ranked_outputs: Vec::new(),
                    scores: None,
                });
                gold.push(item.d.clone());
            }
        }
    }
    let mut report = evaluate_generation(&aligned, &gold)?;
    let window = ctx.config.eval.mrr_window;
    report.mrr = mrr_within(&aligned, &gold, window)?;
    report.hit_at.retain(|(k, _)| *k <= window);
    if !report.hit_at.iter().any(|(k, _)| *k == window) {
        report.hit_at.push((window, hit_at_k(&aligned, &gold, window)?));
    }
    let eval = GenerationEval {
        report,
        mrr_window: window,
        missing_predictions: missing,
    };
    jsonl::write_json(&ctx.out("eval_generation.json"), &eval)?;
    std::fs::write(ctx.out("eval_generation.txt"), eval.report.to_string())?;
    Ok(eval)
}

pub fn retrieve(ctx: &Ctx, kb_dir: &Path, query: (&str, &str, &str), k: usize) -> anyhow::Result<FewShotPrompt> {
    let cfg = &ctx.config;
    let kb = load_kb("retrieve", kb_dir)?;
    let pool = cfg.eval.retrieval_pool;
    let mut analogies = kb.sample_analogies(AnalogyKind::SameRelation, pool, cfg.seed).analogies;
    analogies.extend(
        kb.sample_analogies(AnalogyKind::AnalogousRelations, pool, cfg.seed)
            .analogies,
    );
    let enc = cfg.embedding.hashed();
    let index = AnalogyIndex::build(analogies, &enc)?;
    let prompt = retrieve_topk_analogies(query, &index, &enc, k)?;
    jsonl::write_json(&ctx.out(RETRIEVAL_FILE), &prompt)?;
    Ok(prompt)
}
