#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const EPOCH: &str = "1700000000";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

/// Which candidates the scripted model picks for each fixture relation.
/// Anything not listed answers "None".
pub fn selection_truth(query: &str) -> &'static [&'static str] {
    match query {
        "CEO of" => &["head of state of"],
        "head of state of" => &["CEO of"],
        "orbits" => &["moves around"],
        "moves around" => &["orbits"],
        "capital of" => &["headquarters of"],
        "headquarters of" => &["capital of", "located in"],
        "located in" => &["capital of", "headquarters of"],
        "lyrics by" => &["composed by", "written by"],
        "composed by" => &["lyrics by"],
        "written by" => &["lyrics by", "composed by", "writing system"],
        "writing system" => &["written by"],
        "founded by" => &["CEO of"],
        "directed by" => &["written by"],
        "currency" => &["official language"],
        "official language" => &["currency"],
        _ => &[],
    }
}

/// Scripted meta-relation answers, keyed by the unordered label pair.
pub fn meta_truth(a: &str, b: &str) -> Option<&'static str> {
    let key = if a <= b { (a, b) } else { (b, a) };
    Some(match key {
        ("CEO of", "head of state of") => " [head of organization].",
        ("moves around", "orbits") => " [revolves around].",
        ("capital of", "headquarters of") => " [administrative center of].",
        ("headquarters of", "located in") => " none",
        ("composed by", "lyrics by") => " [created by].",
        ("lyrics by", "written by") => " NONE.",
        ("writing system", "written by") => " None.",
        ("currency", "official language") => " [national attribute of].",
        _ => return None,
    })
}

fn last_line_with<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(prefix))
}

fn bracketed(s: &str) -> Vec<&str> {
    s.split('[')
        .skip(1)
        .filter_map(|part| part.split(']').next())
        .collect()
}

/// The fixture model: answers selection prompts from `selection_truth`
/// (restricted to the shown candidates) and meta prompts from `meta_truth`.
pub fn fixture_script(prompt: &str) -> Option<String> {
    if let Some(query) = last_line_with(prompt, "Given relation: ") {
        let shown: Vec<&str> = last_line_with(prompt, "Relation candidates: [")?
            .trim_end_matches(']')
            .split(", ")
            .collect();
        let picked: Vec<&str> = selection_truth(query)
            .iter()
            .copied()
            .filter(|c| shown.contains(c))
            .collect();
        return Some(if picked.is_empty() {
            " None".to_string()
        } else {
            format!(" {}", picked.join(", "))
        });
    }
    let last = prompt.lines().last()?;
    let labels = bracketed(last);
    if labels.len() == 2 {
        return meta_truth(labels[0], labels[1]).map(str::to_string);
    }
    None
}

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_analogykb"));
    cmd.env("SOURCE_DATE_EPOCH", EPOCH).env_remove("RUST_LOG");
    cmd
}

/// Runs one stage against the fixture config, writing into `out`.
pub fn stage(out: &Path, args: &[&str]) -> Output {
    let output = bin()
        .arg("--config")
        .arg(fixture("pipeline.toml"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn analogykb");
    output
}

pub fn stage_ok(out: &Path, args: &[&str]) -> serde_json::Value {
    let output = stage(out, args);
    assert!(
        output.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
    serde_json::from_slice(&output.stdout).expect("stage prints JSON")
}

/// Runs ingest through gen-data on the fixture.
pub fn run_pipeline(out: &Path) -> BTreeMap<&'static str, serde_json::Value> {
    let verdicts = fixture("review_verdicts.jsonl");
    let mut summaries = BTreeMap::new();
    summaries.insert("ingest", stage_ok(out, &["ingest"]));
    summaries.insert("link", stage_ok(out, &["link"]));
    summaries.insert("llm-filter", stage_ok(out, &["llm-filter"]));
    summaries.insert(
        "curate-serve",
        stage_ok(out, &["curate-serve", "--no-serve", "--apply", verdicts.to_str().unwrap()]),
    );
    summaries.insert("build-kb", stage_ok(out, &["build-kb"]));
    summaries.insert("stats", stage_ok(out, &["stats"]));
    summaries.insert("gen-data", stage_ok(out, &["gen-data"]));
    summaries
}

/// Every file under `dir` (relative path -> bytes), skipping `skip` names.
pub fn snapshot(dir: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if skip.contains(&name.as_str()) {
                continue;
            }
            if path.is_dir() {
                walk(root, &path, skip, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, skip, &mut out);
    out
}
