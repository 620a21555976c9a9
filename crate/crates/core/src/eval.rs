//! Recognition baselines, generation metrics and retrieval-augmented prompts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::McqaItem;
use crate::embed::{cosine_slices, dot, EmbeddingVector, HashedNgramEmbedder};
use crate::error::{Error, Result};
use crate::kb::Analogy;

/// Ranks considered by MRR.
pub const MRR_WINDOW: usize = 10;
pub const DEFAULT_RETRIEVAL_K: usize = 8;
pub const GENERATION_TASK: &str = "Please make analogies.";

/// Word vectors in the plain text format `token v1 v2 ...`. An optional
/// word2vec-style `count dim` header line is skipped.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut wv = WordVectors::default();
        for (token, v) in entries {
            wv.insert(token, v)?;
        }
        Ok(wv)
    }

    fn insert(&mut self, token: String, v: Vec<f64>) -> Result<()> {
        if self.vectors.is_empty() {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(Error::DimensionMismatch(self.dim, v.len()));
        }
        self.vectors.insert(token, v);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut wv = WordVectors::default();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse).collect();
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            match values {
                Ok(v) if idx == 0 && v.len() == 1 && token.parse::<usize>().is_ok() => continue,
                Ok(v) if !v.is_empty() => wv
                    .insert(token.to_string(), v)
                    .map_err(|e| parse_err(e.to_string()))?,
                Ok(_) => return Err(parse_err("token without values".into())),
                Err(e) => return Err(parse_err(e.to_string())),
            }
        }
        Ok(wv)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn token(&self, token: &str) -> Option<&Vec<f64>> {
        self.vectors
            .get(token)
            .or_else(|| self.vectors.get(&token.to_lowercase()))
    }

    /// Vector of a concept; multiword concepts average their token vectors.
    /// `None` if any token is unknown.
    pub fn concept(&self, concept: &str) -> Option<Vec<f64>> {
        let tokens: Vec<&str> = concept.split_whitespace().collect();
        if tokens.is_empty() {
            return None;
        }
        let mut sum = vec![0.0; self.dim];
        for t in &tokens {
            let v = self.token(t)?;
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        let n = tokens.len() as f64;
        Some(sum.into_iter().map(|s| s / n).collect())
    }

    /// Multiplies every vector by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        WordVectors {
            dim: self.dim,
            vectors: self
                .vectors
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x * alpha).collect()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    /// Per-candidate scores; `-inf` for degenerate candidates.
    pub scores: Vec<f64>,
}

/// Highest score wins; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn missing(concept: &str) -> Error {
    Error::InvalidArgument(format!("no embedding for {concept:?}"))
}

fn diff(wv: &WordVectors, from: &str, to: &str) -> Result<Vec<f64>> {
    let x = wv.concept(from).ok_or_else(|| missing(from))?;
    let y = wv.concept(to).ok_or_else(|| missing(to))?;
    Ok(y.iter().zip(&x).map(|(y, x)| y - x).collect())
}

/// Vector-offset baseline: the candidate whose `D - C` is most cosine-similar
/// to the query's `B - A`.
pub fn offset_predict(item: &McqaItem, wv: &WordVectors) -> Result<Prediction> {
    let query = diff(wv, &item.query.a, &item.query.b)?;
    if dot(&query, &query) == 0.0 {
        return Err(Error::ZeroVector);
    }
    let scores = item
        .candidates
        .iter()
        .map(|c| {
            let cand = diff(wv, &c.c, &c.d)?;
            Ok(cosine_slices(&query, &cand).unwrap_or(f64::NEG_INFINITY))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Prediction {
        index: argmax(&scores),
        scores,
    })
}

/// Text encoder used by the sentence baseline and by retrieval.
pub trait SentenceEncoder {
    fn encode(&self, text: &str) -> Option<Vec<f64>>;
}

impl SentenceEncoder for HashedNgramEmbedder {
    fn encode(&self, text: &str) -> Option<Vec<f64>> {
        Some(self.embed(text).values().to_vec())
    }
}

impl SentenceEncoder for HashMap<String, EmbeddingVector> {
    fn encode(&self, text: &str) -> Option<Vec<f64>> {
        self.get(text).map(|v| v.values().to_vec())
    }
}

/// Sentence baseline: "A is to B" against each "C is to D".
pub fn sentence_predict(item: &McqaItem, encoder: &dyn SentenceEncoder) -> Result<Prediction> {
    let text = format!("{} is to {}", item.query.a, item.query.b);
    let query = encoder.encode(&text).ok_or_else(|| missing(&text))?;
    let scores = item
        .candidates
        .iter()
        .map(|c| {
            let text = format!("{} is to {}", c.c, c.d);
            let v = encoder.encode(&text).ok_or_else(|| missing(&text))?;
            Ok(cosine_slices(&query, &v).unwrap_or(f64::NEG_INFINITY))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Prediction {
        index: argmax(&scores),
        scores,
    })
}

pub fn accuracy(preds: &[usize], gold: &[usize]) -> Result<f64> {
    if preds.len() != gold.len() {
        return Err(Error::LengthMismatch(preds.len(), gold.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub item_id: String,
    pub ranked_outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// 1-based rank of `gold` among the outputs, considering the first `window`.
fn rank_of(pred: &RankedPrediction, gold: &str, window: usize) -> Option<usize> {
    let gold = normalize_answer(gold);
    pred.ranked_outputs
        .iter()
        .take(window)
        .position(|o| normalize_answer(o) == gold)
        .map(|i| i + 1)
}

fn mean_over<F>(preds: &[RankedPrediction], gold: &[String], f: F) -> Result<f64>
where
    F: Fn(&RankedPrediction, &str) -> f64,
{
    if preds.len() != gold.len() {
        return Err(Error::LengthMismatch(preds.len(), gold.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    Ok(preds.iter().zip(gold).map(|(p, g)| f(p, g)).sum::<f64>() / preds.len() as f64)
}

/// Mean reciprocal rank over the default top-10 window.
pub fn mrr(preds: &[RankedPrediction], gold: &[String]) -> Result<f64> {
    mrr_within(preds, gold, MRR_WINDOW)
}

/// Mean reciprocal rank; a gold answer outside the first `window` outputs scores 0.
pub fn mrr_within(preds: &[RankedPrediction], gold: &[String], window: usize) -> Result<f64> {
    mean_over(preds, gold, |p, g| {
        rank_of(p, g, window).map_or(0.0, |r| 1.0 / r as f64)
    })
}

/// Fraction of items whose gold answer is among the first `k` outputs.
pub fn hit_at_k(preds: &[RankedPrediction], gold: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    mean_over(preds, gold, |p, g| {
        if rank_of(p, g, k).is_some() {
            1.0
        } else {
            0.0
        }
    })
}

/// With one gold answer per item, recall@k coincides with hit@k.
pub fn recall_at_k(preds: &[RankedPrediction], gold: &[String], k: usize) -> Result<f64> {
    hit_at_k(preds, gold, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPrompt {
    /// `(a, b, c, d)` of each exemplar, most similar first.
    pub exemplars: Vec<(String, String, String, String)>,
    pub query: (String, String, String),
    pub rendered: String,
}

pub fn render_generation_prompt(
    exemplars: &[(String, String, String, String)],
    query: (&str, &str, &str),
) -> String {
    let mut out = String::from(GENERATION_TASK);
    out.push('\n');
    for (a, b, c, d) in exemplars {
        out.push_str(&format!("input: {a} is to {b} as {c} is to\noutput: {d}\n"));
    }
    let (a, b, c) = query;
    out.push_str(&format!("input: {a} is to {b} as {c} is to\noutput:"));
    out
}

/// KB analogies with the embeddings of their rendered sentences.
pub struct AnalogyIndex {
    analogies: Vec<Analogy>,
    vectors: Vec<Vec<f64>>,
}

impl AnalogyIndex {
    pub fn build(analogies: Vec<Analogy>, encoder: &dyn SentenceEncoder) -> Result<Self> {
        let vectors = analogies
            .iter()
            .map(|a| {
                let text = a.render();
                encoder.encode(&text).ok_or_else(|| missing(&text))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { analogies, vectors })
    }

    pub fn len(&self) -> usize {
        self.analogies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.analogies.is_empty()
    }

    pub fn analogies(&self) -> &[Analogy] {
        &self.analogies
    }

    /// Indices and scores of the `k` most similar analogies (score
    /// descending, index ascending on ties).
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, cosine_slices(query, v).unwrap_or(f64::NEG_INFINITY)))
            .collect();
        scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        scored.truncate(k);
        scored
    }
}

/// Builds a few-shot generation prompt from the `k` KB analogies closest to
/// "a is to b as c is to".
pub fn retrieve_topk_analogies(
    query: (&str, &str, &str),
    index: &AnalogyIndex,
    encoder: &dyn SentenceEncoder,
    k: usize,
) -> Result<FewShotPrompt> {
    let exemplars: Vec<(String, String, String, String)> = if k == 0 {
        Vec::new()
    } else {
        let text = format!("{} is to {} as {} is to", query.0, query.1, query.2);
        let qv = encoder.encode(&text).ok_or_else(|| missing(&text))?;
        index
            .nearest(&qv, k)
            .into_iter()
            .map(|(i, _)| {
                let a = &index.analogies[i];
                (a.a.clone(), a.b.clone(), a.c.clone(), a.d.clone())
            })
            .collect()
    };
    Ok(FewShotPrompt {
        rendered: render_generation_prompt(&exemplars, query),
        query: (query.0.to_string(), query.1.to_string(), query.2.to_string()),
        exemplars,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub method: String,
    pub items: usize,
    pub evaluated: usize,
    pub skipped: Vec<String>,
    pub accuracy: f64,
}

/// Runs a recognition baseline over items; items it cannot score are skipped
/// and listed in the report.
pub fn evaluate_recognition<F>(method: &str, items: &[McqaItem], predict: F) -> RecognitionReport
where
    F: Fn(&McqaItem) -> Result<Prediction>,
{
    let mut preds = Vec::new();
    let mut gold = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        match predict(item) {
            Ok(p) => {
                preds.push(p.index);
                gold.push(item.answer);
            }
            Err(e) => {
                tracing::debug!(item = %item.id, error = %e, "skipping item");
                skipped.push(item.id.clone());
            }
        }
    }
    RecognitionReport {
        method: method.to_string(),
        items: items.len(),
        evaluated: preds.len(),
        skipped,
        accuracy: accuracy(&preds, &gold).unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub items: usize,
    pub accuracy: f64,
    pub mrr: f64,
    pub recall_at_5: f64,
    pub hit_at: Vec<(usize, f64)>,
}

pub fn evaluate_generation(preds: &[RankedPrediction], gold: &[String]) -> Result<GenerationReport> {
    Ok(GenerationReport {
        items: preds.len(),
        accuracy: hit_at_k(preds, gold, 1)?,
        mrr: mrr(preds, gold)?,
        recall_at_5: recall_at_k(preds, gold, 5)?,
        hit_at: [1, 3, 5, 10]
            .into_iter()
            .map(|k| Ok((k, hit_at_k(preds, gold, k)?)))
            .collect::<Result<_>>()?,
    })
}

impl std::fmt::Display for GenerationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:>8}", "metric", "value")?;
        writeln!(f, "{:<12} {:>8}", "items", self.items)?;
        writeln!(f, "{:<12} {:>8.4}", "accuracy", self.accuracy)?;
        writeln!(f, "{:<12} {:>8.4}", "mrr", self.mrr)?;
        writeln!(f, "{:<12} {:>8.4}", "recall@5", self.recall_at_5)?;
        for (k, v) in &self.hit_at {
            writeln!(f, "{:<12} {:>8.4}", format!("hit@{k}"), v)?;
        }
        Ok(())
    }
}

impl std::fmt::Display for RecognitionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:>8}", "metric", "value")?;
        writeln!(f, "{:<12} {:>8}", "method", self.method)?;
        writeln!(f, "{:<12} {:>8}", "items", self.items)?;
        writeln!(f, "{:<12} {:>8}", "evaluated", self.evaluated)?;
        writeln!(f, "{:<12} {:>8.4}", "accuracy", self.accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CandidatePair, McqaRelations, QueryPair};
    use crate::kb::AnalogyKind;

    fn ranked(outputs: &[&str]) -> RankedPrediction {
        RankedPrediction {
            item_id: "x".into(),
            ranked_outputs: outputs.iter().map(|s| s.to_string()).collect(),
            scores: None,
        }
    }

    fn item(q: (&str, &str), cands: &[(&str, &str)], answer: usize) -> McqaItem {
        McqaItem {
            id: "i".into(),
            query: QueryPair {
                a: q.0.into(),
                b: q.1.into(),
            },
            candidates: cands
                .iter()
                .map(|(c, d)| CandidatePair {
                    c: c.to_string(),
                    d: d.to_string(),
                })
                .collect(),
            answer,
            kind: AnalogyKind::SameRelation,
            relations: McqaRelations {
                query: "wikidata:r".into(),
                candidates: vec![],
            },
            shared_concept: false,
            query_text: String::new(),
            candidate_texts: vec![],
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[0], &[]), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn rank_metrics() {
        let gold = |s: &str| vec![s.to_string()];
        assert_eq!(mrr(&[ranked(&["sun", "moon"])], &gold("Sun")).unwrap(), 1.0);
        let r3 = mrr(&[ranked(&["a", "b", "pew"])], &gold("pew")).unwrap();
        assert!((r3 - 1.0 / 3.0).abs() < 1e-12);
        let far: Vec<String> = (0..10).map(|i| format!("w{i}")).chain(["pew".to_string()]).collect();
        let far = RankedPrediction {
            item_id: "x".into(),
            ranked_outputs: far,
            scores: None,
        };
        assert_eq!(mrr(&[far], &gold("pew")).unwrap(), 0.0);
        let p4 = ranked(&["a", "b", "c", "pew", "e", "f"]);
        assert_eq!(hit_at_k(&[p4.clone()], &gold("pew"), 5).unwrap(), 1.0);
        let p6 = ranked(&["a", "b", "c", "d", "e", "pew"]);
        assert_eq!(recall_at_k(&[p6], &gold("pew"), 5).unwrap(), 0.0);
        assert!(hit_at_k(&[p4], &gold("pew"), 0).is_err());
    }

    #[test]
    fn offset_baseline_ties_and_degenerate_candidates() {
        let wv = WordVectors::from_entries([
            ("a".to_string(), vec![0.0, 0.0]),
            ("b".to_string(), vec![1.0, 0.0]),
            ("c".to_string(), vec![5.0, 5.0]),
        ])
        .unwrap();
        // every candidate equals the query pair -> tie -> index 0
        let same = item(("a", "b"), &[("a", "b"), ("a", "b"), ("a", "b"), ("a", "b")], 0);
        assert_eq!(offset_predict(&same, &wv).unwrap().index, 0);
        // zero diff candidate scores -inf
        let zero = item(("a", "b"), &[("c", "c"), ("b", "a"), ("a", "b"), ("c", "c")], 2);
        let p = offset_predict(&zero, &wv).unwrap();
        assert_eq!(p.index, 2);
        assert_eq!(p.scores[0], f64::NEG_INFINITY);
        let unknown = item(("a", "zzz"), &[("a", "b"); 4], 0);
        assert!(offset_predict(&unknown, &wv).is_err());
    }

    #[test]
    fn multiword_concepts_average_tokens() {
        let wv = WordVectors::from_entries([
            ("new".to_string(), vec![1.0, 0.0]),
            ("york".to_string(), vec![0.0, 3.0]),
        ])
        .unwrap();
        assert_eq!(wv.concept("New York").unwrap(), vec![0.5, 1.5]);
        assert!(wv.concept("new jersey").is_none());
    }

    #[test]
    fn loads_text_vectors_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        std::fs::write(&path, "2 3\nking 1 2 3\nqueen 1 2 4\n").unwrap();
        let wv = WordVectors::load(&path).unwrap();
        assert_eq!((wv.len(), wv.dim()), (2, 3));
        std::fs::write(&path, "king 1 2 3\nqueen 1 2\n").unwrap();
        assert!(WordVectors::load(&path).is_err());
    }

    #[test]
    fn sentence_baseline_picks_identical_sentence() {
        let enc = HashedNgramEmbedder::default();
        let it = item(("lion", "cat"), &[("up", "down"), ("lion", "cat"), ("x", "y"), ("lion", "cat")], 1);
        let p = sentence_predict(&it, &enc).unwrap();
        assert_eq!(p.index, 1);
        assert!((p.scores[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_prompt_layout() {
        let ex = vec![
            ("artist".into(), "paintbrush".into(), "magician".into(), "wand".into()),
            ("razor".into(), "shave".into(), "knife".into(), "cut".into()),
        ];
        let p = render_generation_prompt(&ex, ("classroom", "desk", "church"));
        assert_eq!(
            p,
            "Please make analogies.\n\
             input: artist is to paintbrush as magician is to\noutput: wand\n\
             input: razor is to shave as knife is to\noutput: cut\n\
             input: classroom is to desk as church is to\noutput:"
        );
    }

    #[test]
    fn zero_shot_retrieval() {
        let enc = HashedNgramEmbedder::default();
        let index = AnalogyIndex::build(vec![], &enc).unwrap();
        let p = retrieve_topk_analogies(("classroom", "desk", "church"), &index, &enc, 0).unwrap();
        assert_eq!(
            p.rendered,
            "Please make analogies.\ninput: classroom is to desk as church is to\noutput:"
        );
    }
}
