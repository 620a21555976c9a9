//! LLM-driven analogous-relation prediction and the two automatic filters.
//!
//! 1. For every relation, the model picks which of its candidate relations can
//!    form analogies with it.
//! 2. Symmetry rule: a relation pair survives only if each relation picked
//!    the other.
//! 3. Meta rule: the model is asked for a higher-level relation covering both;
//!    an answer of "None" discards the pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{pair_key, AnalogousRelationPair, PairStatus, Provenance, RelationId};
use crate::linker::CandidateSet;
use crate::llm::LlmBackend;

pub const SELECTION_TASK: &str =
    "Choose the relations from the relation candidates that can form an analogy with the given relation.";
pub const META_TASK: &str =
    "Induce two relations into a higher-level relation and explain why they can form an analogy.";

/// Few-shot block shipped for selection prompts.
pub const DEFAULT_SELECTION_EXEMPLARS: &str = include_str!("../data/selection_exemplars.txt");
/// Few-shot block shipped for meta-relation prompts.
pub const DEFAULT_META_EXEMPLARS: &str = include_str!("../data/meta_exemplars.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplars {
    pub selection: String,
    pub meta: String,
}

impl Default for Exemplars {
    fn default() -> Self {
        Self {
            selection: DEFAULT_SELECTION_EXEMPLARS.to_string(),
            meta: DEFAULT_META_EXEMPLARS.to_string(),
        }
    }
}

impl Exemplars {
    pub fn zero_shot() -> Self {
        Self {
            selection: String::new(),
            meta: String::new(),
        }
    }
}

pub fn build_selection_prompt(query: &str, candidates: &[String], exemplars: &str) -> String {
    let mut prompt = String::new();
    prompt.push_str(SELECTION_TASK);
    prompt.push_str("\n\n");
    let exemplars = exemplars.trim();
    if !exemplars.is_empty() {
        prompt.push_str(exemplars);
        prompt.push_str("\n\n");
    }
    prompt.push_str(&format!(
        "Given relation: {query}\nRelation candidates: [{}]\nAnswer:",
        candidates.join(", ")
    ));
    prompt
}

pub fn build_meta_prompt(a: &str, b: &str, exemplars: &str) -> String {
    let mut prompt = String::new();
    prompt.push_str(META_TASK);
    prompt.push_str("\n\n");
    let exemplars = exemplars.trim();
    if !exemplars.is_empty() {
        prompt.push_str(exemplars);
        prompt.push('\n');
    }
    prompt.push_str(&format!(
        "The relation [{a}] and the relation [{b}] can form an analogy because both of them can be induced into a relation:"
    ));
    prompt
}

/// Labels as shown to the model. A label shared by several relations in the
/// same prompt is qualified with its source so every name is unambiguous.
pub fn display_labels(ids: &[&RelationId]) -> Vec<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for id in ids {
        *counts.entry(id.label().to_lowercase()).or_default() += 1;
    }
    ids.iter()
        .map(|id| {
            if counts[&id.label().to_lowercase()] > 1 {
                match id.source() {
                    Some(src) => format!("{} ({src})", id.label()),
                    None => id.as_str().to_string(),
                }
            } else {
                id.label().to_string()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub query: RelationId,
    pub candidates_shown: Vec<RelationId>,
    pub selected: Vec<RelationId>,
    /// Answer tokens that matched no shown candidate.
    pub unmatched: Vec<String>,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRelationResult {
    pub pair: (RelationId, RelationId),
    pub meta: Option<String>,
    pub raw_response: String,
}

fn clean_token(token: &str) -> &str {
    token
        .trim()
        .trim_matches(|c: char| matches!(c, '[' | ']' | '"' | '\''))
        .trim_end_matches('.')
        .trim()
}

/// Splits the first line of a selection answer into labels. Returns the
/// indices of matched `shown` labels (in answer order, deduplicated) and the
/// tokens that matched nothing.
pub fn parse_selection(response: &str, shown: &[String]) -> (Vec<usize>, Vec<String>) {
    let line = response.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let line = clean_token(line);
    if line.eq_ignore_ascii_case("none") {
        return (Vec::new(), Vec::new());
    }
    let lowered: Vec<String> = shown.iter().map(|s| s.trim().to_lowercase()).collect();
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for token in line.split(',') {
        let token = clean_token(token);
        if token.is_empty() || token.chars().all(|c| c == '.' || c == '…') {
            continue;
        }
        match lowered.iter().position(|l| *l == token.to_lowercase()) {
            Some(i) if !matched.contains(&i) => matched.push(i),
            Some(_) => {}
            None => unmatched.push(token.to_string()),
        }
    }
    (matched, unmatched)
}

pub fn select_analogous(
    set: &CandidateSet,
    backend: &dyn LlmBackend,
    exemplars: &str,
) -> Result<SelectionResult> {
    let shown: Vec<RelationId> = set.candidates.iter().map(|c| c.relation.clone()).collect();
    let mut all: Vec<&RelationId> = vec![&set.query];
    all.extend(shown.iter());
    let labels = display_labels(&all);
    let prompt = build_selection_prompt(&labels[0], &labels[1..], exemplars);
    let response = backend.complete(&prompt)?;
    let (picked, unmatched) = parse_selection(&response, &labels[1..]);
    if !unmatched.is_empty() {
        tracing::info!(query = %set.query, ?unmatched, "dropping answers that are not candidates");
    }
    Ok(SelectionResult {
        query: set.query.clone(),
        selected: picked.into_iter().map(|i| shown[i].clone()).collect(),
        candidates_shown: shown,
        unmatched,
        raw_response: response,
    })
}

/// Every selected (query, candidate) link as an unordered, deduplicated pair.
pub fn raw_pairs(results: &[SelectionResult]) -> Vec<(RelationId, RelationId)> {
    results
        .iter()
        .flat_map(|r| r.selected.iter().map(move |s| pair_key(&r.query, s)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Keeps `(r1, r2)` iff r1 selected r2 and r2 selected r1.
pub fn apply_symmetry_rule(results: &[SelectionResult]) -> Vec<(RelationId, RelationId)> {
    let selected: HashMap<&RelationId, BTreeSet<&RelationId>> = results
        .iter()
        .map(|r| (&r.query, r.selected.iter().collect()))
        .collect();
    let mut kept = BTreeSet::new();
    for r in results {
        for other in &r.selected {
            if other != &r.query
                && selected
                    .get(other)
                    .is_some_and(|back| back.contains(&r.query))
            {
                kept.insert(pair_key(&r.query, other));
            }
        }
    }
    kept.into_iter().collect()
}

/// The meta relation in a completion, or `None` when the model declined.
pub fn parse_meta(response: &str) -> Option<String> {
    let line = response.lines().find(|l| !l.trim().is_empty())?.trim();
    let meta = if let Some(rest) = line.strip_prefix('[') {
        rest.split(']').next().unwrap_or(rest)
    } else {
        line.split(". ").next().unwrap_or(line)
    };
    let meta = clean_token(meta);
    if meta.is_empty() || meta.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(meta.to_string())
    }
}

pub fn summarize_meta(
    pair: &(RelationId, RelationId),
    backend: &dyn LlmBackend,
    exemplars: &str,
) -> Result<MetaRelationResult> {
    let labels = display_labels(&[&pair.0, &pair.1]);
    let prompt = build_meta_prompt(&labels[0], &labels[1], exemplars);
    let response = backend.complete(&prompt)?;
    Ok(MetaRelationResult {
        pair: pair.clone(),
        meta: parse_meta(&response),
        raw_response: response,
    })
}

/// Pairs with a meta relation become pending review items; the rest are dropped.
pub fn apply_meta_rule(results: &[MetaRelationResult]) -> Vec<AnalogousRelationPair> {
    let mut out: Vec<AnalogousRelationPair> = results
        .iter()
        .filter_map(|r| {
            let meta = r.meta.as_ref()?;
            Some(AnalogousRelationPair::new(
                r.pair.0.clone(),
                r.pair.1.clone(),
                meta.clone(),
                Provenance::Auto,
                PairStatus::Pending,
            ))
        })
        .collect();
    out.sort_by(|a, b| a.key().cmp(&b.key()));
    out.dedup_by(|a, b| a.key() == b.key());
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub raw: usize,
    pub after_symmetry: usize,
    pub after_meta: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub selections: Vec<SelectionResult>,
    pub metas: Vec<MetaRelationResult>,
    pub pending: Vec<AnalogousRelationPair>,
    pub funnel: Funnel,
}

/// Runs selection, both rules, and meta summarization over every candidate
/// set. Prompts are dispatched on at most `max_in_flight` threads; the output
/// order does not depend on scheduling.
pub fn run_filter(
    sets: &[CandidateSet],
    backend: &dyn LlmBackend,
    exemplars: &Exemplars,
    max_in_flight: usize,
) -> Result<FilterOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let selections: Vec<SelectionResult> = pool.install(|| {
        sets.par_iter()
            .filter(|s| !s.candidates.is_empty())
            .map(|s| select_analogous(s, backend, &exemplars.selection))
            .collect::<Result<_>>()
    })?;
    let raw = raw_pairs(&selections);
    let symmetric = apply_symmetry_rule(&selections);
    let metas: Vec<MetaRelationResult> = pool.install(|| {
        symmetric
            .par_iter()
            .map(|p| summarize_meta(p, backend, &exemplars.meta))
            .collect::<Result<_>>()
    })?;
    let pending = apply_meta_rule(&metas);
    Ok(FilterOutput {
        funnel: Funnel {
            raw: raw.len(),
            after_symmetry: symmetric.len(),
            after_meta: pending.len(),
        },
        selections,
        metas,
        pending,
    })
}

/// Selections keyed by query, for callers that need lookups.
pub fn selections_by_query(results: &[SelectionResult]) -> BTreeMap<&RelationId, &SelectionResult> {
    results.iter().map(|r| (&r.query, r)).collect()
}
