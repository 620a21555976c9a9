use std::collections::{BTreeMap, BTreeSet, HashSet};

use analogykb::curation::fleiss_kappa;
use analogykb::dataset::{make_generation_dataset, make_recognition_dataset};
use analogykb::embed::{EmbeddingVector, HashedNgramEmbedder};
use analogykb::eval::{hit_at_k, mrr, RankedPrediction, DEFAULT_RETRIEVAL_K, MRR_WINDOW};
use analogykb::filter::{apply_symmetry_rule, parse_selection, raw_pairs, SelectionResult};
use analogykb::ingest::{normalize_concept, RawTriple, Source, DEFAULT_MIN_WEIGHT};
use analogykb::kb::{AnalogousRelationPair, AnalogyKind, BuildInfo, Kb, PairStatus, Provenance, RelationId};
use analogykb::linker::{RelationIndex, DEFAULT_CANDIDATE_K};
use proptest::prelude::*;

fn rid(label: &str) -> RelationId {
    RelationId::new(Source::Wikidata, label)
}

fn triple(rel: &str, s: &str, o: &str, score: f64) -> RawTriple {
    RawTriple {
        subject: s.into(),
        relation_label: rel.into(),
        object: o.into(),
        score,
        source: Source::Wikidata,
    }
}

fn approved(x: &str, y: &str) -> AnalogousRelationPair {
    AnalogousRelationPair::new(rid(x), rid(y), "meta", Provenance::Auto, PairStatus::Approved)
}

/// Relation `r{i}` gets `sizes[i]` pairs `s{i}_{j} -> o{i}_{j}`; `links` are approved pairs.
fn synthetic_kb(sizes: &[usize], links: &[(usize, usize)]) -> Kb {
    let mut triples = Vec::new();
    for (i, n) in sizes.iter().enumerate() {
        for j in 0..*n {
            triples.push(triple(&format!("r{i}"), &format!("s{i}_{j}"), &format!("o{i}_{j}"), (j * 7 % 13) as f64));
        }
    }
    let pairs: Vec<_> = links
        .iter()
        .map(|(x, y)| approved(&format!("r{x}"), &format!("r{y}")))
        .collect();
    Kb::build(&triples, &pairs).unwrap()
}

#[test]
fn defaults_match_the_method() {
    assert_eq!(DEFAULT_MIN_WEIGHT, 2.0);
    assert_eq!(DEFAULT_CANDIDATE_K, 20);
    assert_eq!(DEFAULT_RETRIEVAL_K, 8);
    assert_eq!(MRR_WINDOW, 10);
}

#[test]
fn hashed_embeddings_match_golden_values() {
    let e = HashedNgramEmbedder::new(8, 3);
    let golden: [(&str, [f64; 8], f64); 3] = [
        ("capital of", [2.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 1.0], 8.0),
        ("CEO of", [1.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0], 14.0),
        ("orbits", [0.0, -2.0, -1.0, 1.0, 0.0, 0.0, 0.0, -1.0], 7.0),
    ];
    for (text, counts, sq) in golden {
        let got = e.embed(text);
        for (g, c) in got.values().iter().zip(counts) {
            assert!((g - c / sq.sqrt()).abs() < 1e-12, "{text}: {:?}", got.values());
        }
    }
}

#[test]
fn kb_round_trips_through_disk() {
    let kb = synthetic_kb(&[4, 6, 3, 5], &[(0, 1), (2, 3)]);
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.txt");
    std::fs::write(&src, "abc").unwrap();
    let info = BuildInfo::with_sources("2023-11-14T22:13:20Z", &[&src]).unwrap();
    assert_eq!(
        info.source_hashes["src.txt"],
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
    kb.save(&dir.path().join("kb"), &info).unwrap();
    let loaded = Kb::load(&dir.path().join("kb")).unwrap();
    assert_eq!(loaded, kb);
    assert_eq!(loaded.stats(), kb.stats());
}

fn brute_cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn vectors(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6).prop_flat_map(move |dim| {
        prop::collection::vec(
            prop::collection::vec(-4i32..=4, dim)
                .prop_filter("nonzero", |v| v.iter().any(|x| *x != 0))
                .prop_map(|v| v.into_iter().map(f64::from).collect()),
            n.clone(),
        )
    })
}

proptest! {
    #[test]
    fn top_k_equals_exhaustive_scan(vs in vectors(2..=60), k in 1usize..30, q in 0usize..60) {
        let ids: Vec<RelationId> = (0..vs.len()).map(|i| rid(&format!("r{i:02}"))).collect();
        let index = RelationIndex::new(
            ids.iter().cloned().zip(vs.iter().map(|v| EmbeddingVector::new(v.clone()).unwrap())),
        ).unwrap();
        let q = q % vs.len();
        let got = index.top_k(&ids[q], k).unwrap();
        let mut scan: Vec<(f64, &RelationId)> = (0..vs.len())
            .filter(|&i| i != q)
            .map(|i| (brute_cos(&vs[q], &vs[i]).clamp(-1.0, 1.0), &ids[i]))
            .collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        scan.truncate(k);
        let got_ids: Vec<&RelationId> = got.candidates.iter().map(|c| &c.relation).collect();
        let want: Vec<&RelationId> = scan.iter().map(|s| s.1).collect();
        prop_assert_eq!(got_ids, want);
    }

    #[test]
    fn symmetry_rule_is_mutual_selection(
        picks in prop::collection::vec(prop::collection::btree_set(0usize..25, 0..8), 2..25)
    ) {
        let n = picks.len();
        let ids: Vec<RelationId> = (0..n).map(|i| rid(&format!("r{i:02}"))).collect();
        let chosen: Vec<BTreeSet<usize>> = picks
            .iter()
            .enumerate()
            .map(|(i, p)| p.iter().map(|x| x % n).filter(|x| *x != i).collect())
            .collect();
        let results: Vec<SelectionResult> = chosen
            .iter()
            .enumerate()
            .map(|(i, p)| SelectionResult {
                query: ids[i].clone(),
                candidates_shown: ids.iter().filter(|x| **x != ids[i]).cloned().collect(),
                selected: p.iter().map(|j| ids[*j].clone()).collect(),
                unmatched: Vec::new(),
                raw_response: String::new(),
            })
            .collect();
        let got: BTreeSet<_> = apply_symmetry_rule(&results).into_iter().collect();
        let mut want = BTreeSet::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if chosen[i].contains(&j) && chosen[j].contains(&i) {
                    want.insert((ids[i].clone(), ids[j].clone()));
                }
            }
        }
        let raw: BTreeSet<_> = raw_pairs(&results).into_iter().collect();
        prop_assert!(got.is_subset(&raw));
        prop_assert_eq!(got, want);
    }

    #[test]
    fn selection_parse_only_returns_shown(resp in "[a-z ,\\[\\].]{0,40}", shown in prop::collection::vec("[a-z]{1,6}", 0..6)) {
        let (picked, _) = parse_selection(&resp, &shown);
        let distinct: HashSet<usize> = picked.iter().copied().collect();
        prop_assert_eq!(distinct.len(), picked.len());
        prop_assert!(picked.iter().all(|i| *i < shown.len()));
    }

    #[test]
    fn normalization_is_idempotent(raw in "[A-Za-z_ \\t]{1,20}") {
        for source in [Source::Conceptnet, Source::Wikidata] {
            if let Ok(once) = normalize_concept(&raw, source) {
                prop_assert_eq!(normalize_concept(&once, source).unwrap(), once);
            }
        }
    }

    #[test]
    fn enumeration_matches_nested_loops(n_a in 1usize..=20, n_b in 1usize..=20) {
        let kb = synthetic_kb(&[n_a, n_b], &[(0, 1)]);
        let same = kb.enumerate_same_relation(&rid("r0"), None).unwrap();
        prop_assert_eq!(same.len(), n_a * (n_a - 1) / 2);
        let distinct: HashSet<_> = same.iter().map(|a| (a.a.clone(), a.c.clone())).collect();
        prop_assert_eq!(distinct.len(), same.len());
        let cross = kb.enumerate_analogous(&rid("r0"), &rid("r1"), None).unwrap();
        prop_assert_eq!(cross.len(), n_a * n_b);
        let stats = kb.stats();
        prop_assert_eq!(stats.same_relation_analogies as usize, n_a * (n_a - 1) / 2 + n_b * (n_b - 1) / 2);
        prop_assert_eq!(stats.analogous_relation_analogies as usize, n_a * n_b);
    }

    #[test]
    fn samples_are_distinct_kb_analogies(sizes in prop::collection::vec(2usize..12, 6..10), n in 1usize..80, seed in any::<u64>()) {
        let kb = synthetic_kb(&sizes, &[(0, 1), (2, 3)]);
        let mut all: HashSet<_> = HashSet::new();
        for i in 0..sizes.len() {
            all.extend(kb.enumerate_same_relation(&rid(&format!("r{i}")), None).unwrap());
        }
        for (x, y) in [(0, 1), (2, 3)] {
            all.extend(kb.enumerate_analogous(&rid(&format!("r{x}")), &rid(&format!("r{y}")), None).unwrap());
        }
        for kind in [AnalogyKind::SameRelation, AnalogyKind::AnalogousRelations] {
            let sample = kb.sample_analogies(kind, n, seed);
            let distinct: HashSet<_> = sample.analogies.iter().collect();
            prop_assert_eq!(distinct.len(), sample.analogies.len());
            prop_assert!(sample.analogies.iter().all(|a| a.kind == kind && all.contains(a)));
            let available = all.iter().filter(|a| a.kind == kind).count();
            prop_assert_eq!(sample.analogies.len(), n.min(available));
            prop_assert_eq!(sample.short, n > available);
        }
    }

    #[test]
    fn recognition_items_are_valid(sizes in prop::collection::vec(3usize..10, 6..10), seed in any::<u64>()) {
        let kb = synthetic_kb(&sizes, &[(0, 1), (2, 3), (0, 4)]);
        let data = make_recognition_dataset(&kb, 30, 30, seed).unwrap();
        let again = make_recognition_dataset(&kb, 30, 30, seed).unwrap();
        prop_assert_eq!(&data, &again);
        for item in &data.items {
            let q = &item.relations.query;
            prop_assert!(kb.relation(q).unwrap().contains(&item.query.a, &item.query.b));
            for (i, (rel, cand)) in item.relations.candidates.iter().zip(&item.candidates).enumerate() {
                prop_assert!(kb.relation(rel).unwrap().contains(&cand.c, &cand.d));
                let related = rel == q || kb.is_analogous(q, rel);
                prop_assert_eq!(related, i == item.answer);
            }
        }
        let generation = make_generation_dataset(&kb, 40, seed);
        for g in &generation.items {
            let rels: Vec<_> = g.relations.iter().map(|r| kb.relation(r).unwrap()).collect();
            let (left, right) = (rels[0].contains(&g.a, &g.b) || rels.last().unwrap().contains(&g.a, &g.b),
                                 rels[0].contains(&g.c, &g.d) || rels.last().unwrap().contains(&g.c, &g.d));
            prop_assert!(left && right, "{:?}", g);
        }
    }

    #[test]
    fn kappa_is_bounded_and_label_symmetric(rows in prop::collection::vec(0usize..=3, 2..20)) {
        let table: Vec<Vec<usize>> = rows.iter().map(|a| vec![*a, 3 - a]).collect();
        if let Ok(k) = fleiss_kappa(&table) {
            prop_assert!(k <= 1.0 + 1e-12);
            let flipped: Vec<Vec<usize>> = table.iter().map(|r| vec![r[1], r[0]]).collect();
            prop_assert!((fleiss_kappa(&flipped).unwrap() - k).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_metrics_are_ordered(ranks in prop::collection::vec(prop::option::of(1usize..15), 1..30)) {
        let preds: Vec<RankedPrediction> = ranks
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut outs: Vec<String> = (0..15).map(|j| format!("x{i}_{j}")).collect();
                if let Some(r) = r {
                    outs[r - 1] = format!("g{i}");
                }
                RankedPrediction { item_id: i.to_string(), ranked_outputs: outs, scores: None }
            })
            .collect();
        let gold: Vec<String> = (0..ranks.len()).map(|i| format!("g{i}")).collect();
        let m = mrr(&preds, &gold).unwrap();
        let hits: Vec<f64> = (1..=10).map(|k| hit_at_k(&preds, &gold, k).unwrap()).collect();
        prop_assert!(hits.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(hits[0] <= m + 1e-12 && m <= hits[9] + 1e-12);
        let want: f64 = ranks.iter().map(|r| r.filter(|r| *r <= 10).map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>()
            / ranks.len() as f64;
        prop_assert!((m - want).abs() < 1e-12);
    }
}

#[test]
fn relation_ids_group_by_source() {
    let counts: BTreeMap<_, _> = synthetic_kb(&[2, 3], &[])
        .relations()
        .map(|r| (r.id.clone(), r.pairs.len()))
        .collect();
    assert_eq!(counts[&rid("r0")], 2);
    assert_eq!(counts[&rid("r1")], 3);
}
