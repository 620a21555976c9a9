//! Human review of predicted analogous relation pairs.
//!
//! State is event-sourced: every enqueue and every annotator decision is an
//! event appended to a JSON-lines log, and the store is rebuilt by replaying
//! that log. An item's status is a pure function of its decisions:
//!
//! * approved: at least two annotators accept and accepts outnumber rejects;
//! * rejected: at least two annotators reject and rejects outnumber accepts;
//! * conflict: otherwise, when both verdicts are present (awaits a third
//!   annotator);
//! * pending: otherwise.
//!
//! Only each annotator's latest verdict counts; superseded verdicts stay in
//! the audit trail.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::kb::{pair_key, AnalogousRelationPair, ConceptPair, Kb, PairStatus, Provenance, RelationId};
use crate::linker::CandidateSet;

/// Concept pairs shown per relation as evidence.
pub const EVIDENCE_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Rejected,
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotator: String,
    pub verdict: Verdict,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: u64,
    pub pair: AnalogousRelationPair,
    pub sample_pairs_a: Vec<ConceptPair>,
    pub sample_pairs_b: Vec<ConceptPair>,
    /// Set when a relation was missing from the KB at enqueue time.
    pub evidence_missing: bool,
    pub decisions: Vec<AnnotationRecord>,
    pub status: ReviewStatus,
}

impl ReviewItem {
    /// Latest verdict of every annotator, in order of first appearance.
    pub fn latest_verdicts(&self) -> Vec<(&str, Verdict)> {
        let mut order: Vec<&str> = Vec::new();
        let mut latest: HashMap<&str, Verdict> = HashMap::new();
        for d in &self.decisions {
            if !latest.contains_key(d.annotator.as_str()) {
                order.push(&d.annotator);
            }
            latest.insert(&d.annotator, d.verdict);
        }
        order.into_iter().map(|a| (a, latest[a])).collect()
    }
}

pub fn resolve_status(decisions: &[AnnotationRecord]) -> ReviewStatus {
    let mut latest: HashMap<&str, Verdict> = HashMap::new();
    for d in decisions {
        latest.insert(&d.annotator, d.verdict);
    }
    let accepts = latest.values().filter(|v| **v == Verdict::Accept).count();
    let rejects = latest.len() - accepts;
    if accepts >= 2 && accepts > rejects {
        ReviewStatus::Approved
    } else if rejects >= 2 && rejects > accepts {
        ReviewStatus::Rejected
    } else if accepts >= 1 && rejects >= 1 {
        ReviewStatus::Conflict
    } else {
        ReviewStatus::Pending
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CurationEvent {
    Enqueued {
        item_id: u64,
        pair: AnalogousRelationPair,
        sample_pairs_a: Vec<ConceptPair>,
        sample_pairs_b: Vec<ConceptPair>,
        evidence_missing: bool,
        timestamp: String,
    },
    Decision {
        item_id: u64,
        annotator: String,
        verdict: Verdict,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
        timestamp: String,
    },
}

#[derive(Debug)]
struct EventLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EventLog {
    fn append(&mut self, event: &CurationEvent) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.out
            .write_all(&line)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total: usize,
    pub pending: usize,
    pub approved: usize,
    pub rejected: usize,
    pub conflict: usize,
    /// Agreement over items with at least two annotators, first two verdicts each.
    pub kappa: Option<f64>,
    pub kappa_items: usize,
}

pub type Clock = fn() -> String;

fn utc_now() -> String {
    chrono::Utc::now().to_rfc3339()
}

#[derive(Debug)]
pub struct CurationStore {
    annotators: BTreeSet<String>,
    candidates: BTreeMap<RelationId, BTreeSet<RelationId>>,
    items: BTreeMap<u64, ReviewItem>,
    by_pair: HashMap<(RelationId, RelationId), u64>,
    events: Vec<CurationEvent>,
    log: Option<EventLog>,
    clock: Clock,
}

impl CurationStore {
    pub fn new(
        annotators: impl IntoIterator<Item = String>,
        candidate_sets: &[CandidateSet],
    ) -> Self {
        let mut candidates: BTreeMap<RelationId, BTreeSet<RelationId>> = BTreeMap::new();
        for set in candidate_sets {
            for c in &set.candidates {
                candidates
                    .entry(set.query.clone())
                    .or_default()
                    .insert(c.relation.clone());
            }
        }
        Self {
            annotators: annotators.into_iter().collect(),
            candidates,
            items: BTreeMap::new(),
            by_pair: HashMap::new(),
            events: Vec::new(),
            log: None,
            clock: utc_now,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Replays the log at `path` (if present) and appends new events to it.
    pub fn open(mut self, path: &Path) -> Result<Self> {
        if path.exists() {
            let events: Vec<CurationEvent> = jsonl::read(path)?;
            for e in events {
                self.apply(e)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(EventLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        });
        Ok(self)
    }

    /// Rebuilds state from an event sequence without persisting anything.
    pub fn replay(mut self, events: impl IntoIterator<Item = CurationEvent>) -> Result<Self> {
        for e in events {
            self.apply(e)?;
        }
        Ok(self)
    }

    pub fn events(&self) -> &[CurationEvent] {
        &self.events
    }

    pub fn annotators(&self) -> &BTreeSet<String> {
        &self.annotators
    }

    fn apply(&mut self, event: CurationEvent) -> Result<()> {
        match &event {
            CurationEvent::Enqueued {
                item_id,
                pair,
                sample_pairs_a,
                sample_pairs_b,
                evidence_missing,
                ..
            } => {
                let key = (pair.rel_a.clone(), pair.rel_b.clone());
                if self.by_pair.contains_key(&key) {
                    return Err(Error::DuplicatePair(key.0.to_string(), key.1.to_string()));
                }
                self.by_pair.insert(key, *item_id);
                self.items.insert(
                    *item_id,
                    ReviewItem {
                        id: *item_id,
                        pair: pair.clone(),
                        sample_pairs_a: sample_pairs_a.clone(),
                        sample_pairs_b: sample_pairs_b.clone(),
                        evidence_missing: *evidence_missing,
                        decisions: Vec::new(),
                        status: ReviewStatus::Pending,
                    },
                );
            }
            CurationEvent::Decision {
                item_id,
                annotator,
                verdict,
                note,
                timestamp,
            } => {
                let item = self
                    .items
                    .get_mut(item_id)
                    .ok_or(Error::UnknownItem(*item_id))?;
                item.decisions.push(AnnotationRecord {
                    annotator: annotator.clone(),
                    verdict: *verdict,
                    timestamp: timestamp.clone(),
                    note: note.clone(),
                });
                item.status = resolve_status(&item.decisions);
                item.pair.status = match item.status {
                    ReviewStatus::Approved => PairStatus::Approved,
                    ReviewStatus::Rejected => PairStatus::Rejected,
                    ReviewStatus::Pending | ReviewStatus::Conflict => PairStatus::Pending,
                };
            }
        }
        self.events.push(event);
        Ok(())
    }

    fn record(&mut self, event: CurationEvent) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            log.append(&event)?;
        }
        self.apply(event)
    }

    fn next_id(&self) -> u64 {
        self.items.keys().next_back().map_or(1, |k| k + 1)
    }

    fn evidence(kb: &Kb, id: &RelationId) -> Option<Vec<ConceptPair>> {
        kb.relation(id)
            .map(|r| r.pairs.iter().take(EVIDENCE_PAIRS).cloned().collect())
    }

    fn enqueue_one(&mut self, pair: AnalogousRelationPair, kb: &Kb) -> Result<u64> {
        let a = Self::evidence(kb, &pair.rel_a);
        let b = Self::evidence(kb, &pair.rel_b);
        let evidence_missing = a.is_none() || b.is_none();
        if evidence_missing {
            tracing::warn!(rel_a = %pair.rel_a, rel_b = %pair.rel_b, "relation missing from KB; no evidence attached");
        }
        let item_id = self.next_id();
        self.record(CurationEvent::Enqueued {
            item_id,
            pair,
            sample_pairs_a: a.unwrap_or_default(),
            sample_pairs_b: b.unwrap_or_default(),
            evidence_missing,
            timestamp: (self.clock)(),
        })?;
        Ok(item_id)
    }

    /// Queues pending pairs for review. Pairs already queued (in any status)
    /// are skipped; only newly created items are returned.
    pub fn enqueue(&mut self, pending: &[AnalogousRelationPair], kb: &Kb) -> Result<Vec<ReviewItem>> {
        let mut created = Vec::new();
        for p in pending {
            if p.status != PairStatus::Pending {
                return Err(Error::InvalidArgument(format!(
                    "{} ~ {} is not pending",
                    p.rel_a, p.rel_b
                )));
            }
            let canonical = AnalogousRelationPair::new(
                p.rel_a.clone(),
                p.rel_b.clone(),
                p.meta_relation.clone(),
                p.provenance,
                PairStatus::Pending,
            );
            if self
                .by_pair
                .contains_key(&(canonical.rel_a.clone(), canonical.rel_b.clone()))
            {
                continue;
            }
            let id = self.enqueue_one(canonical, kb)?;
            created.push(self.items[&id].clone());
        }
        Ok(created)
    }

    fn check_annotator(&self, annotator: &str) -> Result<()> {
        if self.annotators.contains(annotator) {
            Ok(())
        } else {
            Err(Error::UnknownAnnotator(annotator.to_string()))
        }
    }

    pub fn submit_decision(
        &mut self,
        item_id: u64,
        annotator: &str,
        verdict: Verdict,
        note: Option<String>,
    ) -> Result<ReviewItem> {
        if !self.items.contains_key(&item_id) {
            return Err(Error::UnknownItem(item_id));
        }
        self.check_annotator(annotator)?;
        self.record(CurationEvent::Decision {
            item_id,
            annotator: annotator.to_string(),
            verdict,
            note,
            timestamp: (self.clock)(),
        })?;
        Ok(self.items[&item_id].clone())
    }

    pub fn is_candidate(&self, x: &RelationId, y: &RelationId) -> bool {
        let listed = |q: &RelationId, c: &RelationId| {
            self.candidates.get(q).is_some_and(|set| set.contains(c))
        };
        listed(x, y) || listed(y, x)
    }

    /// Adds a relation pair the automatic stages missed. The pair must come
    /// from the candidate sets and must not be queued already.
    pub fn add_pair(
        &mut self,
        x: &RelationId,
        y: &RelationId,
        annotator: &str,
        kb: &Kb,
    ) -> Result<ReviewItem> {
        self.check_annotator(annotator)?;
        if x == y || !self.is_candidate(x, y) {
            return Err(Error::NotCandidate(x.to_string(), y.to_string()));
        }
        let key = pair_key(x, y);
        if self.by_pair.contains_key(&key) {
            return Err(Error::DuplicatePair(key.0.to_string(), key.1.to_string()));
        }
        let pair = AnalogousRelationPair::new(
            key.0,
            key.1,
            String::new(),
            Provenance::HumanAdded,
            PairStatus::Pending,
        );
        let id = self.enqueue_one(pair, kb)?;
        self.submit_decision(id, annotator, Verdict::Accept, None)
    }

    pub fn item(&self, id: u64) -> Option<&ReviewItem> {
        self.items.get(&id)
    }

    pub fn items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values()
    }

    /// Items still awaiting decisions (pending or conflict) with id > `cursor`.
    pub fn queue(&self, cursor: u64, limit: usize) -> Vec<&ReviewItem> {
        self.items
            .range(cursor.saturating_add(1)..)
            .map(|(_, item)| item)
            .filter(|i| matches!(i.status, ReviewStatus::Pending | ReviewStatus::Conflict))
            .take(limit)
            .collect()
    }

    pub fn stats(&self) -> ReviewStats {
        let mut stats = ReviewStats::default();
        let mut table = Vec::new();
        for item in self.items.values() {
            stats.total += 1;
            match item.status {
                ReviewStatus::Pending => stats.pending += 1,
                ReviewStatus::Approved => stats.approved += 1,
                ReviewStatus::Rejected => stats.rejected += 1,
                ReviewStatus::Conflict => stats.conflict += 1,
            }
            let verdicts = item.latest_verdicts();
            if verdicts.len() >= 2 {
                table.push(verdicts[..2].iter().map(|(_, v)| *v).collect::<Vec<_>>());
            }
        }
        stats.kappa_items = table.len();
        stats.kappa = if table.is_empty() {
            None
        } else {
            fleiss_kappa_verdicts(&table).ok()
        };
        stats
    }

    /// Approved pairs in canonical order.
    pub fn export_approved(&self) -> Vec<AnalogousRelationPair> {
        let mut out: Vec<_> = self
            .items
            .values()
            .filter(|i| i.status == ReviewStatus::Approved)
            .map(|i| i.pair.clone())
            .collect();
        out.sort_by(|a, b| a.key().cmp(&b.key()));
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        jsonl::write(path, self.items.values())
    }
}

/// Fleiss' kappa over a table of per-category rating counts, one row per
/// item. Every row must sum to the same number of raters `m >= 2`.
pub fn fleiss_kappa(table: &[Vec<usize>]) -> Result<f64> {
    let Some(first) = table.first() else {
        return Err(Error::KappaUndefined("no items"));
    };
    let m: usize = first.iter().sum();
    let categories = first.len();
    if m < 2 {
        return Err(Error::KappaUndefined("fewer than two raters per item"));
    }
    for (item, row) in table.iter().enumerate() {
        let got: usize = row.iter().sum();
        if got != m || row.len() != categories {
            return Err(Error::RaggedAgreement {
                item,
                got,
                expected: m,
            });
        }
    }
    let n_items = table.len() as f64;
    let m_f = m as f64;
    let p_bar = table
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|c| c * c).sum();
            (sq as f64 - m_f) / (m_f * (m_f - 1.0))
        })
        .sum::<f64>()
        / n_items;
    let p_e: f64 = (0..categories)
        .map(|j| {
            let pj = table.iter().map(|row| row[j]).sum::<usize>() as f64 / (n_items * m_f);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return if (1.0 - p_bar).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(Error::KappaUndefined("chance agreement is 1"))
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa over accept/reject verdicts, one list of verdicts per item.
pub fn fleiss_kappa_verdicts(items: &[Vec<Verdict>]) -> Result<f64> {
    let expected = items.first().map_or(0, Vec::len);
    let table = items
        .iter()
        .enumerate()
        .map(|(item, vs)| {
            if vs.len() != expected {
                return Err(Error::RaggedAgreement {
                    item,
                    got: vs.len(),
                    expected,
                });
            }
            let accepts = vs.iter().filter(|v| **v == Verdict::Accept).count();
            Ok(vec![accepts, vs.len() - accepts])
        })
        .collect::<Result<Vec<_>>>()?;
    fleiss_kappa(&table)
}
