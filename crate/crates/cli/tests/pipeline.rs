mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde_json::Value;

fn read_lines(path: &std::path::Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn fixture_pipeline_matches_golden_and_reruns_identically() {
    let started = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    common::run_pipeline(a.path());
    common::run_pipeline(b.path());
    let elapsed = started.elapsed();

    for name in ["pending_pairs.jsonl", "approved_pairs.jsonl", "funnel.json"] {
        let got = std::fs::read_to_string(a.path().join(name)).unwrap();
        let want = std::fs::read_to_string(common::fixture("golden").join(name)).unwrap();
        assert_eq!(got, want, "{name} differs from golden");
    }

    // the resolved config names its own output directory
    let skip = ["config.resolved.toml"];
    let left = common::snapshot(a.path(), &skip);
    let right = common::snapshot(b.path(), &skip);
    assert_eq!(left.keys().collect::<Vec<_>>(), right.keys().collect::<Vec<_>>());
    for (name, bytes) in &left {
        assert!(bytes == &right[name], "{name} differs between runs");
    }
    assert!(left.contains_key("mcqa.jsonl") && left.contains_key("generation.jsonl"));
    assert!(elapsed.as_secs_f64() < 20.0, "two runs took {elapsed:?}");
}

#[test]
fn stats_equal_brute_force_recount() {
    let out = tempfile::tempdir().unwrap();
    let summaries = common::run_pipeline(out.path());
    let stats = &summaries["stats"]["summary"];

    let mut pairs: BTreeMap<String, BTreeSet<(String, String)>> = BTreeMap::new();
    for t in read_lines(&out.path().join("triples.jsonl")) {
        let id = format!("{}:{}", t["source"].as_str().unwrap(), t["relation"].as_str().unwrap());
        pairs.entry(id).or_default().insert((
            t["subject"].as_str().unwrap().to_string(),
            t["object"].as_str().unwrap().to_string(),
        ));
    }
    let n_pairs: usize = pairs.values().map(|p| p.len()).sum();
    let same: usize = pairs.values().map(|p| p.len() * p.len().saturating_sub(1) / 2).sum();
    let mut cross = 0usize;
    for p in read_lines(&out.path().join("approved_pairs.jsonl")) {
        let x = &pairs[p["rel_a"].as_str().unwrap()];
        let y = &pairs[p["rel_b"].as_str().unwrap()];
        for px in x {
            for py in y {
                if px != py {
                    cross += 1;
                }
            }
        }
    }
    assert_eq!(stats["relations"], pairs.len());
    assert_eq!(stats["concept_pairs"], n_pairs);
    assert_eq!(stats["same_relation_analogies"], same);
    assert_eq!(stats["analogous_relation_analogies"], cross);
    assert_eq!(stats["approved_pairs"], 4);

    let on_disk: Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("kb_stats.json")).unwrap()).unwrap();
    assert_eq!(&on_disk, stats);
}

#[test]
fn missing_predecessor_names_the_stage() {
    let out = tempfile::tempdir().unwrap();
    for (stage, producer) in [
        ("link", "ingest"),
        ("llm-filter", "link"),
        ("build-kb", "ingest"),
        ("stats", "build-kb"),
        ("gen-data", "build-kb"),
    ] {
        let output = common::stage(out.path(), &[stage]);
        assert!(!output.status.success(), "{stage} ran without inputs");
        let stderr = String::from_utf8_lossy(&output.stderr);
        assert!(stderr.contains(&format!("{stage}:")), "{stderr}");
        assert!(stderr.contains(producer), "{stderr}");
    }
}

#[test]
fn build_kb_before_review_warns_and_has_no_pairs() {
    let out = tempfile::tempdir().unwrap();
    common::stage_ok(out.path(), &["ingest"]);
    let output = common::stage(out.path(), &["build-kb"]);
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("warning"));
    let summary: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(summary["summary"]["stats"]["analogous_pairs"], 0);
    assert_eq!(summary["summary"]["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn every_run_writes_resolved_config() {
    let out = tempfile::tempdir().unwrap();
    common::stage_ok(out.path(), &["--seed", "7", "ingest"]);
    let text = std::fs::read_to_string(out.path().join("config.resolved.toml")).unwrap();
    let config = analogykb_cli::PipelineConfig::parse(&text).unwrap();
    assert_eq!(config.seed, 7);
    assert_eq!(config.out_dir, out.path());
    assert_eq!(config.ingest.min_weight, 2.0);
    assert_eq!(config.link.candidate_k, 20);
    assert_eq!(config.eval.retrieval_k, 8);
}

#[test]
fn retrieve_and_eval_run_on_fixture_kb() {
    let out = tempfile::tempdir().unwrap();
    common::run_pipeline(out.path());
    let r = common::stage_ok(out.path(), &["retrieve", "--query", "classroom,desk,church"]);
    let prompt = r["summary"]["rendered"].as_str().unwrap();
    assert!(prompt.starts_with("Please make analogies.\n"));
    assert!(prompt.ends_with("input: classroom is to desk as church is to\noutput:"));
    assert_eq!(r["summary"]["exemplars"].as_array().unwrap().len(), 8);

    let zero = common::stage_ok(out.path(), &["retrieve", "--query", "a,b,c", "--k", "0"]);
    assert_eq!(
        zero["summary"]["rendered"],
        "Please make analogies.\ninput: a is to b as c is to\noutput:"
    );

    // oracle predictions: the gold answer first for even items, absent for odd
    let gen = read_lines(&out.path().join("generation.jsonl"));
    let preds: Vec<String> = gen
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ranked = if i % 2 == 0 {
                vec![g["d"].as_str().unwrap().to_uppercase(), "x".into()]
            } else {
                vec!["x".to_string()]
            };
            serde_json::json!({"item_id": g["id"], "ranked_outputs": ranked}).to_string()
        })
        .collect();
    let pred_path = out.path().join("preds.jsonl");
    std::fs::write(&pred_path, preds.join("\n")).unwrap();
    let e = common::stage_ok(out.path(), &["eval", "generation", "--predictions", pred_path.to_str().unwrap()]);
    let expected = gen.len().div_ceil(2) as f64 / gen.len() as f64;
    assert!((e["summary"]["mrr"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert!((e["summary"]["accuracy"].as_f64().unwrap() - expected).abs() < 1e-12);

    let s = common::stage_ok(out.path(), &["eval", "recognition", "--method", "sentence"]);
    assert_eq!(s["summary"]["evaluated"], 300);
}

#[test]
fn inline_api_key_in_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[llm]\napi_key = \"sk-secret\"\n").unwrap();
    let output = common::bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .arg("stats")
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("environment"));
}

#[test]
fn alias_file_changes_embedded_text() {
    let plain = tempfile::tempdir().unwrap();
    let aliased = tempfile::tempdir().unwrap();
    let alias_file = aliased.path().join("aliases.tsv");
    std::fs::write(&alias_file, "CEO of\tchief executive officer of\norbits\trevolves around\n").unwrap();
    let mut runs = Vec::new();
    for (dir, aliases) in [(plain.path(), None), (aliased.path(), Some(alias_file.clone()))] {
        let mut config = analogykb_cli::PipelineConfig::load(&common::fixture("pipeline.toml")).unwrap();
        config.out_dir = dir.to_path_buf();
        config.link.aliases = aliases;
        let ctx = analogykb_cli::Ctx::new(config).unwrap();
        analogykb_cli::stages::ingest(&ctx).unwrap();
        let summary = analogykb_cli::stages::link(&ctx).unwrap();
        runs.push((summary.aliased, std::fs::read(dir.join("candidates.jsonl")).unwrap()));
    }
    assert_eq!(runs[0].0, 0);
    assert_eq!(runs[1].0, 2);
    assert_ne!(runs[0].1, runs[1].1, "aliases did not reach the embedder");

    let missing = tempfile::tempdir().unwrap();
    let mut config = analogykb_cli::PipelineConfig::load(&common::fixture("pipeline.toml")).unwrap();
    config.out_dir = missing.path().to_path_buf();
    config.link.aliases = Some(missing.path().join("nope.tsv"));
    let ctx = analogykb_cli::Ctx::new(config).unwrap();
    analogykb_cli::stages::ingest(&ctx).unwrap();
    let err = analogykb_cli::stages::link(&ctx).unwrap_err();
    assert!(err.downcast_ref::<analogykb_cli::MissingArtifact>().is_some(), "{err:#}");
}
