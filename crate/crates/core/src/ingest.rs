//! Knowledge-graph dump ingestion.
//!
//! Two line-oriented inputs are understood:
//!
//! * ConceptNet assertion dumps (5 tab-separated columns: assertion URI,
//!   relation URI, start URI, end URI, JSON metadata carrying `weight`),
//!   plain or gzip-compressed.
//! * A pre-extracted Wikidata slice with the header
//!   `subject\tproperty\tobject\tpageviews` and an optional fifth
//!   `object_pageviews` column.
//!
//! Malformed lines are counted in the [`IngestReport`] and skipped; they never
//! abort a run. Output order always follows input order.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Default ConceptNet weight threshold. Assertions must be strictly above it.
pub const DEFAULT_MIN_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Conceptnet,
    Wikidata,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Conceptnet => "conceptnet",
            Source::Wikidata => "wikidata",
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conceptnet" => Ok(Source::Conceptnet),
            "wikidata" => Ok(Source::Wikidata),
            other => Err(Error::InvalidArgument(format!("unknown source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTriple {
    pub subject: String,
    #[serde(rename = "relation")]
    pub relation_label: String,
    pub object: String,
    pub score: f64,
    pub source: Source,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub triples_read: usize,
    pub triples_kept: usize,
    pub triples_dropped_by_weight: usize,
    pub triples_dropped_by_language: usize,
    pub relations_seen: usize,
    pub malformed_lines: usize,
}

impl IngestReport {
    pub fn merge(&mut self, other: &IngestReport) {
        self.triples_read += other.triples_read;
        self.triples_kept += other.triples_kept;
        self.triples_dropped_by_weight += other.triples_dropped_by_weight;
        self.triples_dropped_by_language += other.triples_dropped_by_language;
        self.relations_seen += other.relations_seen;
        self.malformed_lines += other.malformed_lines;
    }
}

/// Normalizes a concept surface form.
///
/// NFC, underscores become spaces, whitespace runs collapse to one space and
/// the ends are trimmed. ConceptNet concepts are lowercased; Wikidata labels
/// keep their casing.
pub fn normalize_concept(raw: &str, source: Source) -> Result<String> {
    let nfc: String = raw.nfc().collect::<String>().replace('_', " ");
    let collapsed = nfc.split_whitespace().collect::<Vec<_>>().join(" ");
    let out = match source {
        Source::Conceptnet => collapsed.to_lowercase(),
        Source::Wikidata => collapsed,
    };
    if out.is_empty() {
        return Err(Error::EmptyConcept(raw.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConceptNetOptions {
    pub language: String,
    /// Assertions with weight `<=` this value are dropped.
    pub min_weight: f64,
}

impl Default for ConceptNetOptions {
    fn default() -> Self {
        Self {
            language: "en".to_string(),
            min_weight: DEFAULT_MIN_WEIGHT,
        }
    }
}

/// Which pageview count becomes a Wikidata pair's popularity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WikidataPopularity {
    #[default]
    Subject,
    Object,
    Sum,
}

/// Opens a file, transparently decompressing gzip input.
pub fn open_dump(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

enum LineOutcome {
    Kept(RawTriple),
    Malformed,
    DroppedByWeight,
    DroppedByLanguage,
}

/// `/c/en/solar_system/n` -> (`en`, `solar_system`)
fn split_concept_uri(uri: &str) -> Option<(&str, &str)> {
    let mut parts = uri.strip_prefix("/c/")?.split('/');
    let lang = parts.next().filter(|s| !s.is_empty())?;
    let term = parts.next().filter(|s| !s.is_empty())?;
    Some((lang, term))
}

fn conceptnet_line(line: &str, opts: &ConceptNetOptions) -> LineOutcome {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 5 {
        return LineOutcome::Malformed;
    }
    let relation = match cols[1].strip_prefix("/r/") {
        Some(r) if !r.is_empty() => r,
        _ => return LineOutcome::Malformed,
    };
    let (Some((s_lang, s_term)), Some((o_lang, o_term))) =
        (split_concept_uri(cols[2]), split_concept_uri(cols[3]))
    else {
        return LineOutcome::Malformed;
    };
    let weight = match serde_json::from_str::<serde_json::Value>(cols[4])
        .ok()
        .and_then(|v| v.get("weight").and_then(|w| w.as_f64()))
    {
        Some(w) if w.is_finite() && w >= 0.0 => w,
        _ => return LineOutcome::Malformed,
    };
    if s_lang != opts.language || o_lang != opts.language {
        return LineOutcome::DroppedByLanguage;
    }
    if weight <= opts.min_weight {
        return LineOutcome::DroppedByWeight;
    }
    let (Ok(subject), Ok(object)) = (
        normalize_concept(s_term, Source::Conceptnet),
        normalize_concept(o_term, Source::Conceptnet),
    ) else {
        return LineOutcome::Malformed;
    };
    LineOutcome::Kept(RawTriple {
        subject,
        relation_label: relation.to_string(),
        object,
        score: weight,
        source: Source::Conceptnet,
    })
}

fn collect<I>(lines: I) -> Result<(Vec<RawTriple>, IngestReport)>
where
    I: Iterator<Item = io::Result<LineOutcome>>,
{
    let mut report = IngestReport::default();
    let mut triples = Vec::new();
    let mut relations = BTreeSet::new();
    for outcome in lines {
        let outcome = outcome.map_err(|e| Error::io("<stream>", e))?;
        report.triples_read += 1;
        match outcome {
            LineOutcome::Kept(t) => {
                relations.insert(t.relation_label.clone());
                triples.push(t);
            }
            LineOutcome::Malformed => report.malformed_lines += 1,
            LineOutcome::DroppedByWeight => report.triples_dropped_by_weight += 1,
            LineOutcome::DroppedByLanguage => report.triples_dropped_by_language += 1,
        }
    }
    report.triples_kept = triples.len();
    report.relations_seen = relations.len();
    Ok((triples, report))
}

pub fn parse_conceptnet<R: BufRead>(
    reader: R,
    opts: &ConceptNetOptions,
) -> Result<(Vec<RawTriple>, IngestReport)> {
    collect(
        reader
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| l.map(|l| conceptnet_line(l.trim_end_matches('\r'), opts))),
    )
}

fn is_wikidata_header(line: &str) -> bool {
    let mut cols = line.split('\t').map(|c| c.trim().to_ascii_lowercase());
    cols.next().as_deref() == Some("subject") && cols.next().as_deref() == Some("property")
}

fn wikidata_line(line: &str, popularity: WikidataPopularity) -> LineOutcome {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 && cols.len() != 5 {
        return LineOutcome::Malformed;
    }
    let (Ok(subject), Ok(object)) = (
        normalize_concept(cols[0], Source::Wikidata),
        normalize_concept(cols[2], Source::Wikidata),
    ) else {
        return LineOutcome::Malformed;
    };
    let relation = cols[1].split_whitespace().collect::<Vec<_>>().join(" ");
    if relation.is_empty() {
        return LineOutcome::Malformed;
    }
    let Ok(subject_views) = cols[3].trim().parse::<u64>() else {
        return LineOutcome::Malformed;
    };
    let object_views = match cols.get(4).map(|c| c.trim().parse::<u64>()) {
        Some(Ok(v)) => Some(v),
        Some(Err(_)) => return LineOutcome::Malformed,
        None => None,
    };
    let score = match (popularity, object_views) {
        (WikidataPopularity::Subject, _) => subject_views as f64,
        (WikidataPopularity::Object, Some(o)) => o as f64,
        (WikidataPopularity::Sum, Some(o)) => (subject_views + o) as f64,
        (_, None) => return LineOutcome::Malformed,
    };
    LineOutcome::Kept(RawTriple {
        subject,
        relation_label: relation,
        object,
        score,
        source: Source::Wikidata,
    })
}

pub fn parse_wikidata<R: BufRead>(
    reader: R,
    popularity: WikidataPopularity,
) -> Result<(Vec<RawTriple>, IngestReport)> {
    let mut first = true;
    collect(reader.lines().filter_map(move |l| {
        let l = match l {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let l = l.trim_end_matches(['\r', '\n']);
        let header = first && is_wikidata_header(l);
        first = false;
        if header || l.trim().is_empty() {
            return None;
        }
        Some(Ok(wikidata_line(l, popularity)))
    }))
}

pub fn write_triples(path: &Path, triples: &[RawTriple]) -> Result<()> {
    crate::jsonl::write(path, triples)
}

pub fn read_triples(path: &Path) -> Result<Vec<RawTriple>> {
    crate::jsonl::read(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cn(rel: &str, s: &str, o: &str, w: &str) -> String {
        format!("/a/[{rel},{s},{o}]\t{rel}\t{s}\t{o}\t{{\"dataset\":\"/d/wordnet\",\"weight\":{w}}}")
    }

    #[test]
    fn conceptnet_keeps_heavy_assertion() {
        let line = cn("/r/IsA", "/c/en/lion", "/c/en/animal", "2.5");
        let (triples, report) =
            parse_conceptnet(line.as_bytes(), &ConceptNetOptions::default()).unwrap();
        assert_eq!(
            triples,
            vec![RawTriple {
                subject: "lion".into(),
                relation_label: "IsA".into(),
                object: "animal".into(),
                score: 2.5,
                source: Source::Conceptnet,
            }]
        );
        assert_eq!(report.triples_kept, 1);
    }

    #[test]
    fn conceptnet_boundary_weight_is_dropped() {
        let line = cn("/r/IsA", "/c/en/lion", "/c/en/animal", "2.0");
        let (triples, report) =
            parse_conceptnet(line.as_bytes(), &ConceptNetOptions::default()).unwrap();
        assert!(triples.is_empty());
        assert_eq!(report.triples_dropped_by_weight, 1);
    }

    #[test]
    fn conceptnet_uri_suffixes_and_underscores() {
        let line = cn("/r/PartOf", "/c/en/Solar_System/n", "/c/en/milky_way/n/wn/object", "3");
        let (triples, _) = parse_conceptnet(line.as_bytes(), &ConceptNetOptions::default()).unwrap();
        assert_eq!(triples[0].subject, "solar system");
        assert_eq!(triples[0].object, "milky way");
        assert_eq!(triples[0].relation_label, "PartOf");
    }

    #[test]
    fn conceptnet_malformed_lines_are_counted() {
        let input = [
            "only\tthree\tcolumns".to_string(),
            cn("/r/IsA", "/c/en/lion", "/c/en/animal", "\"heavy\""),
            "/a/x\t/r/IsA\t/c/en/a\t/c/en/b\tnot json".to_string(),
            cn("/r/IsA", "/c/fr/lion", "/c/en/animal", "5.0"),
            cn("/r/IsA", "/c/en/___", "/c/en/animal", "5.0"),
        ]
        .join("\n");
        let (triples, report) =
            parse_conceptnet(input.as_bytes(), &ConceptNetOptions::default()).unwrap();
        assert!(triples.is_empty());
        assert_eq!(report.triples_read, 5);
        assert_eq!(report.malformed_lines, 4);
        assert_eq!(report.triples_dropped_by_language, 1);
    }

    #[test]
    fn wikidata_records() {
        let input = "subject\tproperty\tobject\tpageviews\n\
                     earth\torbit\tsun\t9000000\n\
                     Tim Cook\tchief executive officer\tApple\t500000\n\
                     Joe Biden\thead of state\t\t10\n";
        let (triples, report) = parse_wikidata(input.as_bytes(), WikidataPopularity::Subject).unwrap();
        assert_eq!(triples.len(), 2);
        assert_eq!(
            triples[0],
            RawTriple {
                subject: "earth".into(),
                relation_label: "orbit".into(),
                object: "sun".into(),
                score: 9_000_000.0,
                source: Source::Wikidata,
            }
        );
        assert_eq!(triples[1].subject, "Tim Cook");
        assert_eq!(report.malformed_lines, 1);
        assert_eq!(report.triples_read, 3);
    }

    #[test]
    fn wikidata_object_popularity_needs_fifth_column() {
        let input = "a\tp\tb\t10\t30\nc\tp\td\t5\n";
        let (triples, report) = parse_wikidata(input.as_bytes(), WikidataPopularity::Sum).unwrap();
        assert_eq!(triples.len(), 1);
        assert_eq!(triples[0].score, 40.0);
        assert_eq!(report.malformed_lines, 1);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_concept("  solar_system ", Source::Conceptnet).unwrap(), "solar system");
        assert_eq!(normalize_concept("Joe  Biden", Source::Wikidata).unwrap(), "Joe Biden");
        assert!(matches!(
            normalize_concept("___", Source::Conceptnet),
            Err(Error::EmptyConcept(_))
        ));
    }

    #[test]
    fn normalize_composes_to_nfc() {
        let decomposed = "cafe\u{301}";
        assert_eq!(normalize_concept(decomposed, Source::Wikidata).unwrap(), "caf\u{e9}");
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_a_fixpoint(raw in "\\PC{0,24}", wiki in proptest::bool::ANY) {
            let source = if wiki { Source::Wikidata } else { Source::Conceptnet };
            if let Ok(once) = normalize_concept(&raw, source) {
                proptest::prop_assert_eq!(normalize_concept(&once, source).unwrap(), once);
            }
        }

        #[test]
        fn conceptnet_never_keeps_light_weights(weights in proptest::collection::vec(0.0f64..5.0, 0..40)) {
            let input: Vec<String> = weights
                .iter()
                .map(|w| cn("/r/IsA", "/c/en/a", "/c/en/b", &format!("{w}")))
                .collect();
            let input = input.join("\n");
            let (triples, report) = parse_conceptnet(input.as_bytes(), &ConceptNetOptions::default()).unwrap();
            proptest::prop_assert!(triples.iter().all(|t| t.score > 2.0));
            proptest::prop_assert!(report.triples_kept + report.triples_dropped_by_weight + report.malformed_lines <= report.triples_read);
            let (again, _) = parse_conceptnet(input.as_bytes(), &ConceptNetOptions::default()).unwrap();
            proptest::prop_assert_eq!(triples, again);
        }
    }
}
