//! The analogy knowledge base.
//!
//! Only two things are stored: the popularity-sorted concept pairs of every
//! relation and the list of analogous relation pairs. Both kinds of analogy
//! are derived on demand:
//!
//! * same-relation analogies are unordered pairs of distinct concept pairs
//!   inside one relation, `C(n, 2)` per relation;
//! * analogous-relation analogies are the cross product of the concept pairs
//!   of two relations that form an approved pair, `n_a * n_b` per pair.
//!
//! Enumeration is popularity-first. Combinations are grouped into rank bands
//! by the rank of their less popular member, so any prefix of the enumeration
//! only involves the most popular concept pairs of each relation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::error::{Error, Result};
use crate::ingest::{RawTriple, Source};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(String);

impl RelationId {
    pub fn new(source: Source, label: &str) -> Self {
        RelationId(format!("{source}:{label}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The relation label, i.e. the id without its `source:` prefix.
    pub fn label(&self) -> &str {
        self.0.split_once(':').map_or(&self.0, |(_, l)| l)
    }

    pub fn source(&self) -> Option<Source> {
        self.0.split_once(':').and_then(|(s, _)| s.parse().ok())
    }
}

impl From<&str> for RelationId {
    fn from(s: &str) -> Self {
        RelationId(s.to_string())
    }
}

impl From<String> for RelationId {
    fn from(s: String) -> Self {
        RelationId(s)
    }
}

impl std::fmt::Display for RelationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPair {
    pub subject: String,
    pub object: String,
    pub popularity: f64,
}

impl ConceptPair {
    pub fn new(subject: impl Into<String>, object: impl Into<String>, popularity: f64) -> Self {
        Self {
            subject: subject.into(),
            object: object.into(),
            popularity,
        }
    }

    fn key(&self) -> (&str, &str) {
        (&self.subject, &self.object)
    }
}

/// Popularity descending, then `(subject, object)` ascending.
pub fn popularity_order(x: &ConceptPair, y: &ConceptPair) -> std::cmp::Ordering {
    y.popularity
        .total_cmp(&x.popularity)
        .then_with(|| x.key().cmp(&y.key()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub label: String,
    pub source: Source,
    pub pairs: Vec<ConceptPair>,
}

impl Relation {
    pub fn contains(&self, subject: &str, object: &str) -> bool {
        self.pairs
            .iter()
            .any(|p| p.subject == subject && p.object == object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Auto,
    HumanAdded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnalogousRelationPair {
    pub rel_a: RelationId,
    pub rel_b: RelationId,
    pub meta_relation: String,
    pub provenance: Provenance,
    pub status: PairStatus,
}

impl AnalogousRelationPair {
    /// Builds a pair with `rel_a < rel_b`.
    pub fn new(
        x: RelationId,
        y: RelationId,
        meta_relation: impl Into<String>,
        provenance: Provenance,
        status: PairStatus,
    ) -> Self {
        let (rel_a, rel_b) = if x <= y { (x, y) } else { (y, x) };
        Self {
            rel_a,
            rel_b,
            meta_relation: meta_relation.into(),
            provenance,
            status,
        }
    }

    pub fn key(&self) -> (&RelationId, &RelationId) {
        (&self.rel_a, &self.rel_b)
    }
}

/// Canonical unordered key for two relation ids.
pub fn pair_key(x: &RelationId, y: &RelationId) -> (RelationId, RelationId) {
    if x <= y {
        (x.clone(), y.clone())
    } else {
        (y.clone(), x.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalogyKind {
    SameRelation,
    AnalogousRelations,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Analogy {
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
    pub kind: AnalogyKind,
    pub relation_ids: Vec<RelationId>,
}

impl Analogy {
    /// "A is to B as C is to D"
    pub fn render(&self) -> String {
        format!("{} is to {} as {} is to {}", self.a, self.b, self.c, self.d)
    }

    fn same(rel: &Relation, x: &ConceptPair, y: &ConceptPair) -> Self {
        let (first, second) = if x.key() <= y.key() { (x, y) } else { (y, x) };
        Analogy {
            a: first.subject.clone(),
            b: first.object.clone(),
            c: second.subject.clone(),
            d: second.object.clone(),
            kind: AnalogyKind::SameRelation,
            relation_ids: vec![rel.id.clone()],
        }
    }

    fn cross(ra: &Relation, x: &ConceptPair, rb: &Relation, y: &ConceptPair) -> Self {
        Analogy {
            a: x.subject.clone(),
            b: x.object.clone(),
            c: y.subject.clone(),
            d: y.object.clone(),
            kind: AnalogyKind::AnalogousRelations,
            relation_ids: vec![ra.id.clone(), rb.id.clone()],
        }
    }
}

/// Index pairs `(i, j)`, `i < j < n`, ordered by `(j, i)`.
pub fn same_relation_order(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..n).flat_map(|j| (0..j).map(move |i| (i, j)))
}

/// Index pairs of band `band` in the cross product `n_a x n_b`: every `(i, j)`
/// with `max(i, j) == band`, ordered by `(i, j)`.
fn cross_band(band: usize, n_a: usize, n_b: usize) -> impl Iterator<Item = (usize, usize)> {
    let low_i = (0..band.min(n_a)).filter(move |_| band < n_b).map(move |i| (i, band));
    let high_i = (0..=band.min(n_b.saturating_sub(1)))
        .filter(move |_| band < n_a && n_b > 0)
        .map(move |j| (band, j));
    low_i.chain(high_i)
}

/// Index pairs in the cross product `n_a x n_b`, ordered by `(max(i, j), i, j)`.
pub fn cross_order(n_a: usize, n_b: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_a.max(n_b)).flat_map(move |band| cross_band(band, n_a, n_b))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Kb {
    relations: BTreeMap<RelationId, Relation>,
    analogous: Vec<AnalogousRelationPair>,
}

impl Kb {
    /// Groups triples into relations (by source and label), deduplicates
    /// concept pairs keeping the highest popularity, and sorts them.
    pub fn build(triples: &[RawTriple], pairs: &[AnalogousRelationPair]) -> Result<Kb> {
        let mut grouped: BTreeMap<RelationId, (String, Source, BTreeMap<(String, String), f64>)> =
            BTreeMap::new();
        for t in triples {
            if t.subject == t.object {
                tracing::debug!(subject = %t.subject, relation = %t.relation_label, "skipping self pair");
                continue;
            }
            let id = RelationId::new(t.source, &t.relation_label);
            let entry = grouped
                .entry(id)
                .or_insert_with(|| (t.relation_label.clone(), t.source, BTreeMap::new()));
            let pop = entry
                .2
                .entry((t.subject.clone(), t.object.clone()))
                .or_insert(t.score);
            if t.score > *pop {
                *pop = t.score;
            }
        }
        let relations = grouped
            .into_iter()
            .map(|(id, (label, source, pairs))| {
                let mut pairs: Vec<ConceptPair> = pairs
                    .into_iter()
                    .map(|((s, o), p)| ConceptPair::new(s, o, p))
                    .collect();
                pairs.sort_by(popularity_order);
                (id.clone(), Relation { id, label, source, pairs })
            })
            .collect();
        Kb::from_parts(relations, pairs)
    }

    fn from_parts(
        relations: BTreeMap<RelationId, Relation>,
        pairs: &[AnalogousRelationPair],
    ) -> Result<Kb> {
        let mut unresolved = BTreeSet::new();
        let mut seen = HashSet::new();
        let mut analogous = Vec::new();
        for p in pairs {
            for id in [&p.rel_a, &p.rel_b] {
                if !relations.contains_key(id) {
                    unresolved.insert(id.to_string());
                }
            }
            if p.rel_a == p.rel_b {
                return Err(Error::InvalidArgument(format!(
                    "relation {} cannot be analogous to itself",
                    p.rel_a
                )));
            }
            let canonical = AnalogousRelationPair::new(
                p.rel_a.clone(),
                p.rel_b.clone(),
                p.meta_relation.clone(),
                p.provenance,
                p.status,
            );
            if seen.insert((canonical.rel_a.clone(), canonical.rel_b.clone())) {
                analogous.push(canonical);
            }
        }
        if !unresolved.is_empty() {
            return Err(Error::UnresolvedRelations(unresolved.into_iter().collect()));
        }
        analogous.sort_by(|x, y| x.key().cmp(&y.key()));
        Ok(Kb {
            relations,
            analogous,
        })
    }

    pub fn relation(&self, id: &RelationId) -> Option<&Relation> {
        self.relations.get(id)
    }

    /// Relations in id order.
    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Analogous relation pairs in canonical order, any status.
    pub fn analogous_pairs(&self) -> &[AnalogousRelationPair] {
        &self.analogous
    }

    pub fn approved_pairs(&self) -> impl Iterator<Item = &AnalogousRelationPair> {
        self.analogous
            .iter()
            .filter(|p| p.status == PairStatus::Approved)
    }

    pub fn find_pair(&self, x: &RelationId, y: &RelationId) -> Option<&AnalogousRelationPair> {
        let key = pair_key(x, y);
        self.analogous
            .binary_search_by(|p| p.key().cmp(&(&key.0, &key.1)))
            .ok()
            .map(|i| &self.analogous[i])
    }

    pub fn is_analogous(&self, x: &RelationId, y: &RelationId) -> bool {
        self.find_pair(x, y)
            .is_some_and(|p| p.status == PairStatus::Approved)
    }

    /// Relations approved as analogous to `id`.
    pub fn analogous_to(&self, id: &RelationId) -> BTreeSet<&RelationId> {
        self.approved_pairs()
            .filter_map(|p| {
                if &p.rel_a == id {
                    Some(&p.rel_b)
                } else if &p.rel_b == id {
                    Some(&p.rel_a)
                } else {
                    None
                }
            })
            .collect()
    }

    fn require(&self, id: &RelationId) -> Result<&Relation> {
        self.relations
            .get(id)
            .ok_or_else(|| Error::UnknownRelation(id.to_string()))
    }

    /// Same-relation analogies in popularity order. `None` means no limit.
    pub fn enumerate_same_relation(
        &self,
        id: &RelationId,
        limit: Option<usize>,
    ) -> Result<Vec<Analogy>> {
        let rel = self.require(id)?;
        Ok(same_relation_order(rel.pairs.len())
            .take(limit.unwrap_or(usize::MAX))
            .map(|(i, j)| Analogy::same(rel, &rel.pairs[i], &rel.pairs[j]))
            .collect())
    }

    /// Cross-relation analogies of an approved pair in popularity order.
    /// `(a, b)` always comes from the pair's `rel_a`. Combinations whose two
    /// concept pairs are identical are skipped.
    pub fn enumerate_analogous(
        &self,
        x: &RelationId,
        y: &RelationId,
        limit: Option<usize>,
    ) -> Result<Vec<Analogy>> {
        let pair = self
            .find_pair(x, y)
            .ok_or_else(|| Error::NotApproved(x.to_string(), y.to_string()))?;
        if pair.status != PairStatus::Approved {
            return Err(Error::NotApproved(x.to_string(), y.to_string()));
        }
        let (ra, rb) = (self.require(&pair.rel_a)?, self.require(&pair.rel_b)?);
        Ok(cross_order(ra.pairs.len(), rb.pairs.len())
            .filter(|&(i, j)| ra.pairs[i].key() != rb.pairs[j].key())
            .take(limit.unwrap_or(usize::MAX))
            .map(|(i, j)| Analogy::cross(ra, &ra.pairs[i], rb, &rb.pairs[j]))
            .collect())
    }

    /// Number of analogies an approved pair derives, without materializing them.
    pub fn analogous_count(&self, pair: &AnalogousRelationPair) -> u64 {
        let (Some(ra), Some(rb)) = (self.relation(&pair.rel_a), self.relation(&pair.rel_b)) else {
            return 0;
        };
        let keys: HashSet<_> = ra.pairs.iter().map(ConceptPair::key).collect();
        let shared = rb.pairs.iter().filter(|p| keys.contains(&p.key())).count();
        (ra.pairs.len() * rb.pairs.len() - shared) as u64
    }

    pub fn stats(&self) -> KbStats {
        let mut stats = KbStats::default();
        for rel in self.relations.values() {
            let n = rel.pairs.len() as u64;
            let src = stats.by_source.entry(rel.source).or_default();
            src.relations += 1;
            src.concept_pairs += n;
            src.same_relation_analogies += n * n.saturating_sub(1) / 2;
            stats.relations += 1;
            stats.concept_pairs += n;
            stats.same_relation_analogies += n * n.saturating_sub(1) / 2;
        }
        stats.analogous_pairs = self.analogous.len() as u64;
        for p in self.approved_pairs() {
            stats.approved_pairs += 1;
            stats.analogous_relation_analogies += self.analogous_count(p);
        }
        stats
    }

    /// Draws up to `n` distinct analogies of `kind`.
    ///
    /// Rank bands are consumed in order (most popular first). The last band
    /// that does not fit entirely is sampled uniformly; every band is shuffled
    /// so the output does not cluster by relation.
    pub fn sample_analogies(&self, kind: AnalogyKind, n: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut band = 0usize;
        let max_band = match kind {
            AnalogyKind::SameRelation => self.relations.values().map(|r| r.pairs.len()).max(),
            AnalogyKind::AnalogousRelations => self
                .approved_pairs()
                .filter_map(|p| {
                    let (a, b) = (self.relation(&p.rel_a)?, self.relation(&p.rel_b)?);
                    Some(a.pairs.len().max(b.pairs.len()))
                })
                .max(),
        }
        .unwrap_or(0);
        while out.len() < n && band < max_band {
            let mut members = self.band_members(kind, band);
            members.shuffle(&mut rng);
            members.truncate(n - out.len());
            out.extend(members);
            band += 1;
        }
        Sample {
            short: out.len() < n,
            analogies: out,
        }
    }

    fn band_members(&self, kind: AnalogyKind, band: usize) -> Vec<Analogy> {
        match kind {
            AnalogyKind::SameRelation => self
                .relations
                .values()
                .filter(|r| band < r.pairs.len())
                .flat_map(|r| (0..band).map(move |i| Analogy::same(r, &r.pairs[i], &r.pairs[band])))
                .collect(),
            AnalogyKind::AnalogousRelations => self
                .approved_pairs()
                .filter_map(|p| Some((self.relation(&p.rel_a)?, self.relation(&p.rel_b)?)))
                .flat_map(|(ra, rb)| {
                    cross_band(band, ra.pairs.len(), rb.pairs.len())
                        .filter(move |&(i, j)| ra.pairs[i].key() != rb.pairs[j].key())
                        .map(move |(i, j)| Analogy::cross(ra, &ra.pairs[i], rb, &rb.pairs[j]))
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path, info: &BuildInfo) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rels: Vec<RelationRecord> = self
            .relations
            .values()
            .map(|r| RelationRecord {
                id: r.id.clone(),
                label: r.label.clone(),
                source: r.source,
                pair_count: r.pairs.len(),
            })
            .collect();
        jsonl::write(&dir.join(RELATIONS_FILE), &rels)?;
        let pairs: Vec<PairRecord> = self
            .relations
            .values()
            .flat_map(|r| {
                r.pairs.iter().map(|p| PairRecord {
                    relation_id: r.id.clone(),
                    subject: p.subject.clone(),
                    object: p.object.clone(),
                    popularity: p.popularity,
                })
            })
            .collect();
        jsonl::write(&dir.join(PAIRS_FILE), &pairs)?;
        jsonl::write(&dir.join(ANALOGOUS_FILE), &self.analogous)?;
        let manifest = Manifest {
            counts: self.stats(),
            built_at: info.built_at.clone(),
            source_hashes: info.source_hashes.clone(),
        };
        jsonl::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Kb> {
        let rels: Vec<RelationRecord> = jsonl::read(&dir.join(RELATIONS_FILE))?;
        let mut relations: BTreeMap<RelationId, Relation> = rels
            .into_iter()
            .map(|r| {
                (
                    r.id.clone(),
                    Relation {
                        id: r.id,
                        label: r.label,
                        source: r.source,
                        pairs: Vec::new(),
                    },
                )
            })
            .collect();
        let pairs: Vec<PairRecord> = jsonl::read(&dir.join(PAIRS_FILE))?;
        for p in pairs {
            let rel = relations
                .get_mut(&p.relation_id)
                .ok_or_else(|| Error::UnknownRelation(p.relation_id.to_string()))?;
            rel.pairs
                .push(ConceptPair::new(p.subject, p.object, p.popularity));
        }
        for rel in relations.values_mut() {
            rel.pairs.sort_by(popularity_order);
        }
        let analogous: Vec<AnalogousRelationPair> = jsonl::read(&dir.join(ANALOGOUS_FILE))?;
        Kb::from_parts(relations, &analogous)
    }
}

pub const RELATIONS_FILE: &str = "relations.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const ANALOGOUS_FILE: &str = "analogous_pairs.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RelationRecord {
    id: RelationId,
    label: String,
    source: Source,
    pair_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairRecord {
    relation_id: RelationId,
    subject: String,
    object: String,
    popularity: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BuildInfo {
    pub built_at: String,
    /// Input file name -> sha256 of its bytes.
    pub source_hashes: BTreeMap<String, String>,
}

impl BuildInfo {
    pub fn with_sources<P: AsRef<Path>>(built_at: impl Into<String>, sources: &[P]) -> Result<Self> {
        let mut source_hashes = BTreeMap::new();
        for path in sources {
            let path = path.as_ref();
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let name = path
                .file_name()
                .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
            source_hashes.insert(name, hex::encode(sha2::Sha256::digest(&bytes)));
        }
        Ok(Self {
            built_at: built_at.into(),
            source_hashes,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub counts: KbStats,
    pub built_at: String,
    pub source_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub relations: u64,
    pub concept_pairs: u64,
    pub same_relation_analogies: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbStats {
    pub relations: u64,
    pub concept_pairs: u64,
    pub by_source: BTreeMap<Source, SourceStats>,
    /// Stored analogous relation pairs, any status.
    pub analogous_pairs: u64,
    pub approved_pairs: u64,
    pub same_relation_analogies: u64,
    pub analogous_relation_analogies: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub analogies: Vec<Analogy>,
    /// Fewer analogies were derivable than requested.
    pub short: bool,
}
