//! Analogy datasets drawn from the KB: four-way multiple-choice recognition
//! items, generation items (`A is to B as C is to ?`), and overlap control
//! against external benchmarks.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{Analogy, AnalogyKind, Kb, Relation, RelationId};

/// Relations a KB needs before distractors can be sourced.
pub const MIN_RELATIONS: usize = 5;
const DISTRACTOR_ATTEMPTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryPair {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub c: String,
    pub d: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaRelations {
    pub query: RelationId,
    pub candidates: Vec<RelationId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaItem {
    pub id: String,
    pub query: QueryPair,
    pub candidates: Vec<CandidatePair>,
    pub answer: usize,
    pub kind: AnalogyKind,
    pub relations: McqaRelations,
    /// Query and answer pairs share a concept.
    pub shared_concept: bool,
    pub query_text: String,
    pub candidate_texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenItem {
    pub id: String,
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
    pub kind: AnalogyKind,
    pub relations: Vec<RelationId>,
    /// "A is to B as C is to", target held out.
    pub text: String,
}

impl GenItem {
    /// Generation item from an analogy. `swap` presents `C:D::A:B` instead,
    /// which is the same analogy read the other way round.
    pub fn from_analogy(id: String, analogy: &Analogy, swap: bool) -> Self {
        let (a, b, c, d) = if swap {
            (&analogy.c, &analogy.d, &analogy.a, &analogy.b)
        } else {
            (&analogy.a, &analogy.b, &analogy.c, &analogy.d)
        };
        let mut relations = analogy.relation_ids.clone();
        if swap {
            relations.reverse();
        }
        GenItem {
            id,
            text: format!("{a} is to {b} as {c} is to"),
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            d: d.clone(),
            kind: analogy.kind,
            relations,
        }
    }
}

/// Anything that reads as `A:B::C:D`.
pub trait AnalogyQuad {
    fn quad(&self) -> (&str, &str, &str, &str);
}

impl AnalogyQuad for Analogy {
    fn quad(&self) -> (&str, &str, &str, &str) {
        (&self.a, &self.b, &self.c, &self.d)
    }
}

impl AnalogyQuad for GenItem {
    fn quad(&self) -> (&str, &str, &str, &str) {
        (&self.a, &self.b, &self.c, &self.d)
    }
}

impl AnalogyQuad for McqaItem {
    fn quad(&self) -> (&str, &str, &str, &str) {
        let ans = &self.candidates[self.answer];
        (&self.query.a, &self.query.b, &ans.c, &ans.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionDataset {
    pub items: Vec<McqaItem>,
    /// Queries dropped for lack of valid distractors.
    pub skipped: usize,
    /// Fewer items than requested.
    pub short: bool,
}

fn eligible_distractor(kb: &Kb, query: &Relation, other: &Relation) -> bool {
    other.id != query.id
        && !other.label.eq_ignore_ascii_case(&query.label)
        && !kb.is_analogous(&query.id, &other.id)
}

struct DistractorPool<'a> {
    relations: Vec<&'a Relation>,
    /// Cumulative pair counts.
    offsets: Vec<usize>,
}

impl<'a> DistractorPool<'a> {
    fn new(kb: &'a Kb) -> Self {
        let relations: Vec<&Relation> = kb.relations().filter(|r| !r.pairs.is_empty()).collect();
        let mut offsets = Vec::with_capacity(relations.len());
        let mut total = 0;
        for r in &relations {
            total += r.pairs.len();
            offsets.push(total);
        }
        Self { relations, offsets }
    }

    fn total(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    fn get(&self, idx: usize) -> (&'a Relation, usize) {
        let r = self.offsets.partition_point(|&end| end <= idx);
        let start = if r == 0 { 0 } else { self.offsets[r - 1] };
        (self.relations[r], idx - start)
    }

    /// Three distinct pairs, uniformly from eligible relations, none equal to
    /// the query or answer pair.
    fn draw(
        &self,
        kb: &Kb,
        query_rel: &Relation,
        taken: &[(&str, &str)],
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<(RelationId, CandidatePair)>> {
        let available: usize = self
            .relations
            .iter()
            .filter(|r| eligible_distractor(kb, query_rel, r))
            .map(|r| r.pairs.len())
            .sum();
        if available < 3 || self.total() == 0 {
            return None;
        }
        let mut seen: HashSet<(String, String)> =
            taken.iter().map(|(s, o)| (s.to_string(), o.to_string())).collect();
        let mut out = Vec::with_capacity(3);
        for _ in 0..DISTRACTOR_ATTEMPTS {
            let (rel, i) = self.get(rng.random_range(0..self.total()));
            if !eligible_distractor(kb, query_rel, rel) {
                continue;
            }
            let p = &rel.pairs[i];
            if seen.insert((p.subject.clone(), p.object.clone())) {
                out.push((
                    rel.id.clone(),
                    CandidatePair {
                        c: p.subject.clone(),
                        d: p.object.clone(),
                    },
                ));
                if out.len() == 3 {
                    return Some(out);
                }
            }
        }
        None
    }
}

fn shares_concept(a: &str, b: &str, c: &str, d: &str) -> bool {
    a == c || a == d || b == c || b == d
}

/// Multiple-choice recognition items: the query pair, its analogous (or
/// same-relation) partner as the answer, and three pairs from relations that
/// are neither the query's relation nor analogous to it.
pub fn make_recognition_dataset(
    kb: &Kb,
    n_same: usize,
    n_analogous: usize,
    seed: u64,
) -> Result<RecognitionDataset> {
    if kb.relation_count() < MIN_RELATIONS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_RELATIONS} relations to source distractors, KB has {}",
            kb.relation_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = kb.sample_analogies(AnalogyKind::SameRelation, n_same, rng.random());
    let analogous = kb.sample_analogies(AnalogyKind::AnalogousRelations, n_analogous, rng.random());
    let pool = DistractorPool::new(kb);
    let mut items = Vec::new();
    let mut skipped = 0;
    for analogy in same.analogies.iter().chain(&analogous.analogies) {
        let swap: bool = rng.random();
        let (a, b, c, d) = analogy.quad();
        let ((qa, qb), (ca, cb)) = if swap { ((c, d), (a, b)) } else { ((a, b), (c, d)) };
        let first = analogy.relation_ids.first().expect("analogy has a relation");
        let last = analogy.relation_ids.last().expect("analogy has a relation");
        let (query_rel, answer_rel) = if swap { (last, first) } else { (first, last) };
        let Some(query_relation) = kb.relation(query_rel) else {
            skipped += 1;
            continue;
        };
        let Some(distractors) = pool.draw(kb, query_relation, &[(qa, qb), (ca, cb)], &mut rng) else {
            skipped += 1;
            continue;
        };
        let mut slots: Vec<(RelationId, CandidatePair, bool)> = distractors
            .into_iter()
            .map(|(r, p)| (r, p, false))
            .collect();
        slots.push((
            answer_rel.clone(),
            CandidatePair {
                c: ca.to_string(),
                d: cb.to_string(),
            },
            true,
        ));
        slots.shuffle(&mut rng);
        let answer = slots.iter().position(|s| s.2).expect("answer slot");
        items.push(McqaItem {
            id: String::new(),
            query_text: format!("{qa} is to {qb}"),
            candidate_texts: slots.iter().map(|s| format!("{} is to {}", s.1.c, s.1.d)).collect(),
            shared_concept: shares_concept(qa, qb, ca, cb),
            query: QueryPair {
                a: qa.to_string(),
                b: qb.to_string(),
            },
            relations: McqaRelations {
                query: query_rel.clone(),
                candidates: slots.iter().map(|s| s.0.clone()).collect(),
            },
            candidates: slots.into_iter().map(|s| s.1).collect(),
            answer,
            kind: analogy.kind,
        });
    }
    items.shuffle(&mut rng);
    for (i, item) in items.iter_mut().enumerate() {
        item.id = format!("mcqa-{:06}", i + 1);
    }
    Ok(RecognitionDataset {
        short: items.len() < n_same + n_analogous,
        items,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationDataset {
    pub items: Vec<GenItem>,
    pub short: bool,
}

/// Generation items, half from same-relation analogies and half from
/// analogous relations (a short kind is topped up from the other). Each
/// analogy is presented in a seed-chosen reading direction.
pub fn make_generation_dataset(kb: &Kb, n: usize, seed: u64) -> GenerationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = kb.sample_analogies(AnalogyKind::SameRelation, n, rng.random());
    let analogous = kb.sample_analogies(AnalogyKind::AnalogousRelations, n, rng.random());
    let want_same = n.div_ceil(2).min(same.analogies.len());
    let want_analogous = (n - want_same).min(analogous.analogies.len());
    let want_same = (n - want_analogous).min(same.analogies.len());
    let mut chosen: Vec<&Analogy> = same.analogies[..want_same]
        .iter()
        .chain(&analogous.analogies[..want_analogous])
        .collect();
    chosen.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(chosen.len());
    for analogy in chosen {
        let item = GenItem::from_analogy(String::new(), analogy, rng.random());
        if seen.insert((item.a.clone(), item.b.clone(), item.c.clone(), item.d.clone())) {
            items.push(item);
        }
    }
    for (i, item) in items.iter_mut().enumerate() {
        item.id = format!("gen-{:06}", i + 1);
    }
    GenerationDataset {
        short: items.len() < n,
        items,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExternalItem {
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
}

impl AnalogyQuad for ExternalItem {
    fn quad(&self) -> (&str, &str, &str, &str) {
        (&self.a, &self.b, &self.c, &self.d)
    }
}

#[derive(Deserialize)]
struct ChoiceRecord {
    stem: Vec<String>,
    choice: Vec<Vec<String>>,
    answer: usize,
}

#[derive(Deserialize)]
struct QuadRecord {
    a: String,
    b: String,
    c: String,
    d: String,
}

fn parse_external_line(line: &str) -> Option<ExternalItem> {
    let item = |a: &str, b: &str, c: &str, d: &str| {
        let parts = [a, b, c, d].map(|s| s.trim().to_string());
        (!parts.iter().any(String::is_empty)).then(|| {
            let [a, b, c, d] = parts;
            ExternalItem { a, b, c, d }
        })
    };
    if line.starts_with('{') {
        if let Ok(r) = serde_json::from_str::<ChoiceRecord>(line) {
            let ans = r.choice.get(r.answer)?;
            return match (r.stem.as_slice(), ans.as_slice()) {
                ([a, b], [c, d]) => item(a, b, c, d),
                _ => None,
            };
        }
        let r: QuadRecord = serde_json::from_str(line).ok()?;
        return item(&r.a, &r.b, &r.c, &r.d);
    }
    if let Some((left, right)) = line.split_once("::") {
        let (a, b) = left.split_once(':')?;
        let (c, d) = right.split_once(':')?;
        return item(a, b, c, d);
    }
    match line.split_whitespace().collect::<Vec<_>>().as_slice() {
        [a, b, c, d] => item(a, b, c, d),
        _ => None,
    }
}

/// Parses external benchmark items. Accepted per line:
///
/// * `{"stem": [a, b], "choice": [[c, d], ...], "answer": i}` (SAT/BATS style),
/// * `{"a": .., "b": .., "c": .., "d": ..}`,
/// * `a:b::c:d`,
/// * `a b c d` (whitespace-separated, single-word concepts).
///
/// Blank lines, `#` comments and `: section` headers are ignored. Returns the
/// items and the number of malformed lines.
pub fn parse_external(text: &str) -> (Vec<ExternalItem>, usize) {
    let mut items = Vec::new();
    let mut malformed = 0;
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') || line.starts_with(": ") {
            continue;
        }
        match parse_external_line(line) {
            Some(i) => items.push(i),
            None => malformed += 1,
        }
    }
    (items, malformed)
}

pub fn load_external(path: &Path) -> Result<(Vec<ExternalItem>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_external(&text))
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Case-insensitive lookup of the relations containing a concept pair.
pub struct PairIndex<'a> {
    kb: &'a Kb,
    relations_of: HashMap<(String, String), Vec<&'a RelationId>>,
}

impl<'a> PairIndex<'a> {
    pub fn new(kb: &'a Kb) -> Self {
        let mut relations_of: HashMap<(String, String), Vec<&RelationId>> = HashMap::new();
        for rel in kb.relations() {
            for p in &rel.pairs {
                relations_of
                    .entry((norm(&p.subject), norm(&p.object)))
                    .or_default()
                    .push(&rel.id);
            }
        }
        Self { kb, relations_of }
    }

    pub fn relations_of(&self, s: &str, o: &str) -> &[&'a RelationId] {
        self.relations_of
            .get(&(norm(s), norm(o)))
            .map_or(&[], Vec::as_slice)
    }

    /// Both tuples are in the KB, under the same relation or under two
    /// approved analogous relations.
    pub fn covers(&self, item: &impl AnalogyQuad) -> bool {
        let (a, b, c, d) = item.quad();
        if (norm(a), norm(b)) == (norm(c), norm(d)) {
            return false;
        }
        let left = self.relations_of(a, b);
        let right = self.relations_of(c, d);
        left.iter()
            .any(|r1| right.iter().any(|r2| r1 == r2 || self.kb.is_analogous(r1, r2)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub rate: f64,
    pub total: usize,
    /// Indices into the external set.
    pub overlapping: Vec<usize>,
}

pub fn compute_overlap(kb: &Kb, external: &[ExternalItem]) -> Result<OverlapReport> {
    if external.is_empty() {
        return Err(Error::EmptyExternalSet);
    }
    let index = PairIndex::new(kb);
    let overlapping: Vec<usize> = external
        .iter()
        .enumerate()
        .filter(|(_, item)| index.covers(*item))
        .map(|(i, _)| i)
        .collect();
    Ok(OverlapReport {
        rate: overlapping.len() as f64 / external.len() as f64,
        total: external.len(),
        overlapping,
    })
}

type QuadKey = BTreeSet<(String, String)>;

fn quad_key(item: &impl AnalogyQuad) -> QuadKey {
    let (a, b, c, d) = item.quad();
    [(norm(a), norm(b)), (norm(c), norm(d))].into_iter().collect()
}

/// Drops training items that state the same analogy as any external item,
/// in either reading direction.
pub fn exclude_overlap<T: AnalogyQuad>(train: Vec<T>, external: &[ExternalItem]) -> Vec<T> {
    let banned: HashSet<QuadKey> = external.iter().map(quad_key).collect();
    train
        .into_iter()
        .filter(|item| !banned.contains(&quad_key(item)))
        .collect()
}
