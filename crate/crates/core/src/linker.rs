//! Candidate search for analogous relations: exact top-k cosine over
//! embedded relation labels.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{dot, EmbeddingVector};
use crate::error::{Error, Result};
use crate::kb::RelationId;

pub const DEFAULT_CANDIDATE_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub relation: RelationId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: RelationId,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn contains(&self, id: &RelationId) -> bool {
        self.candidates.iter().any(|c| &c.relation == id)
    }
}

/// Score descending, then id ascending.
pub(crate) fn ranking(x: &Candidate, y: &Candidate) -> std::cmp::Ordering {
    y.score
        .total_cmp(&x.score)
        .then_with(|| x.relation.cmp(&y.relation))
}

/// Immutable set of embedded relations.
#[derive(Debug, Clone)]
pub struct RelationIndex {
    ids: Vec<RelationId>,
    vectors: Vec<EmbeddingVector>,
    norms: Vec<f64>,
}

impl RelationIndex {
    pub fn new(entries: impl IntoIterator<Item = (RelationId, EmbeddingVector)>) -> Result<Self> {
        let mut entries: Vec<_> = entries.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        let dim = entries.first().map(|e| e.1.dim());
        let mut index = RelationIndex {
            ids: Vec::with_capacity(entries.len()),
            vectors: Vec::with_capacity(entries.len()),
            norms: Vec::with_capacity(entries.len()),
        };
        for (id, v) in entries {
            if Some(v.dim()) != dim {
                return Err(Error::DimensionMismatch(dim.unwrap_or(0), v.dim()));
            }
            let norm = v.norm();
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            index.ids.push(id);
            index.vectors.push(v);
            index.norms.push(norm);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[RelationId] {
        &self.ids
    }

    /// Exact top-k by cosine, query excluded. Fewer than `k` others → all of them.
    pub fn top_k(&self, query: &RelationId, k: usize) -> Result<CandidateSet> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = self
            .ids
            .binary_search(query)
            .map_err(|_| Error::UnknownRelation(query.to_string()))?;
        let qv = self.vectors[q].values();
        let mut candidates: Vec<Candidate> = (0..self.len())
            .filter(|&i| i != q)
            .map(|i| Candidate {
                relation: self.ids[i].clone(),
                score: (dot(qv, self.vectors[i].values()) / (self.norms[q] * self.norms[i]))
                    .clamp(-1.0, 1.0),
            })
            .collect();
        if candidates.len() > k {
            candidates.select_nth_unstable_by(k - 1, ranking);
            candidates.truncate(k);
        }
        candidates.sort_by(ranking);
        Ok(CandidateSet {
            query: query.clone(),
            candidates,
        })
    }

    /// Candidate sets for every relation, in id order.
    pub fn all_candidates(&self, k: usize) -> Result<Vec<CandidateSet>> {
        self.ids.par_iter().map(|id| self.top_k(id, k)).collect()
    }
}

/// Relation aliases from a TSV of `label<TAB>alias` rows, one alias per row.
/// Blank lines and `#` comments are skipped; labels match case-insensitively.
pub fn parse_aliases(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((label, alias)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected label<TAB>alias".into(),
            });
        };
        let (label, alias) = (label.trim().to_lowercase(), alias.trim());
        if label.is_empty() || alias.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "empty label or alias".into(),
            });
        }
        let entry = out.entry(label).or_default();
        if !entry.iter().any(|a| a == alias) {
            entry.push(alias.to_string());
        }
    }
    Ok(out)
}

pub fn load_aliases(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_aliases(&text, path)
}

/// Text embedded for a relation: its label, then any aliases, `; `-separated.
pub fn relation_text(label: &str, aliases: &BTreeMap<String, Vec<String>>) -> String {
    match aliases.get(&label.to_lowercase()) {
        Some(extra) if !extra.is_empty() => format!("{label}; {}", extra.join("; ")),
        _ => label.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: &[(&str, &[f64])]) -> RelationIndex {
        RelationIndex::new(
            rows.iter()
                .map(|(id, v)| (RelationId::from(*id), EmbeddingVector::new(v.to_vec()).unwrap())),
        )
        .unwrap()
    }

    #[test]
    fn aliases_extend_the_embedded_text() {
        let path = Path::new("aliases.tsv");
        let aliases = parse_aliases("# comment\nCEO of\tchief executive of\nceo of\tchief executive of\n\nceo of\tboss of\n", path).unwrap();
        assert_eq!(relation_text("CEO of", &aliases), "CEO of; chief executive of; boss of");
        assert_eq!(relation_text("orbits", &aliases), "orbits");
        assert!(matches!(parse_aliases("no tab here\n", path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn clamps_to_available_relations() {
        let idx = index(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[1.0, 1.0])]);
        let set = idx.top_k(&"a".into(), 20).unwrap();
        assert_eq!(set.candidates.len(), 2);
        assert!(!set.contains(&"a".into()));
        assert_eq!(set.candidates[0].relation.as_str(), "c");
    }

    #[test]
    fn ties_break_by_id() {
        let idx = index(&[("q", &[1.0, 0.0]), ("z", &[0.0, 1.0]), ("m", &[0.0, 2.0])]);
        let set = idx.top_k(&"q".into(), 5).unwrap();
        let ids: Vec<_> = set.candidates.iter().map(|c| c.relation.as_str()).collect();
        assert_eq!(ids, vec!["m", "z"]);
    }

    #[test]
    fn rejects_zero_k_and_unknown_query() {
        let idx = index(&[("a", &[1.0]), ("b", &[2.0])]);
        assert!(idx.top_k(&"a".into(), 0).is_err());
        assert!(matches!(idx.top_k(&"x".into(), 1), Err(Error::UnknownRelation(_))));
    }

    #[test]
    fn rejects_zero_vectors() {
        let r = RelationIndex::new([("a".into(), EmbeddingVector::new(vec![0.0, 0.0]).unwrap())]);
        assert!(matches!(r, Err(Error::ZeroVector)));
    }
}
