//! Pipeline configuration: one TOML document shared by every stage.

use std::path::{Path, PathBuf};
use std::time::Duration;

use analogykb::embed::{EmbedOptions, EmbeddingProvider, HashedNgramEmbedder, RemoteEmbedder};
use analogykb::eval::{DEFAULT_RETRIEVAL_K, MRR_WINDOW};
use analogykb::ingest::{ConceptNetOptions, WikidataPopularity, DEFAULT_MIN_WEIGHT};
use analogykb::linker::DEFAULT_CANDIDATE_K;
use analogykb::llm::LlmBackendSpec;
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sources: Sources,
    pub ingest: IngestConfig,
    pub embedding: EmbeddingConfig,
    pub link: LinkConfig,
    pub llm: LlmBackendSpec,
    pub filter: FilterConfig,
    pub curation: CurationConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("out"),
            sources: Sources::default(),
            ingest: IngestConfig::default(),
            embedding: EmbeddingConfig::default(),
            link: LinkConfig::default(),
            llm: LlmBackendSpec::default(),
            filter: FilterConfig::default(),
            curation: CurationConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sources {
    pub conceptnet: Vec<PathBuf>,
    pub wikidata: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub language: String,
    /// ConceptNet assertions need a weight strictly above this.
    pub min_weight: f64,
    pub wikidata_popularity: WikidataPopularity,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            language: "en".into(),
            min_weight: DEFAULT_MIN_WEIGHT,
            wikidata_popularity: WikidataPopularity::Subject,
        }
    }
}

impl IngestConfig {
    pub fn conceptnet_options(&self) -> ConceptNetOptions {
        ConceptNetOptions {
            language: self.language.clone(),
            min_weight: self.min_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    pub dim: usize,
    pub ngram: usize,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub retries: u32,
    pub timeout_secs: u64,
    pub cache_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        let hashed = HashedNgramEmbedder::default();
        let opts = EmbedOptions::default();
        Self {
            provider: ProviderKind::Hashed,
            dim: hashed.dim,
            ngram: hashed.ngram,
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-ada-002".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            retries: 3,
            timeout_secs: 60,
            cache_dir: None,
            batch_size: opts.batch_size,
            max_in_flight: opts.max_in_flight,
        }
    }
}

impl EmbeddingConfig {
    pub fn hashed(&self) -> HashedNgramEmbedder {
        HashedNgramEmbedder::new(self.dim, self.ngram)
    }

    pub fn provider(&self) -> Box<dyn EmbeddingProvider> {
        match self.provider {
            ProviderKind::Hashed => Box::new(self.hashed()),
            ProviderKind::Remote => Box::new(RemoteEmbedder {
                endpoint: self.endpoint.clone(),
                model: self.model.clone(),
                api_key_env: self.api_key_env.clone(),
                retries: self.retries,
                timeout: Duration::from_secs(self.timeout_secs),
            }),
        }
    }

    pub fn options(&self) -> EmbedOptions {
        EmbedOptions {
            batch_size: self.batch_size,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub candidate_k: usize,
    /// `label<TAB>alias` file; when set, aliases are appended to each label before embedding.
    pub aliases: Option<PathBuf>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            candidate_k: DEFAULT_CANDIDATE_K,
            aliases: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Drop the few-shot exemplars from both prompts.
    pub zero_shot: bool,
    pub max_in_flight: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            zero_shot: false,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub annotators: Vec<String>,
    pub bind: String,
    pub static_dir: Option<PathBuf>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            annotators: vec!["annotator-1".into(), "annotator-2".into(), "annotator-3".into()],
            bind: "127.0.0.1:8080".into(),
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_same: usize,
    pub n_analogous: usize,
    pub n_generation: usize,
    pub external: Vec<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_same: 500,
            n_analogous: 500,
            n_generation: 1000,
            external: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub retrieval_k: usize,
    pub mrr_window: usize,
    /// Upper bound on KB analogies indexed for retrieval, per kind.
    pub retrieval_pool: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval_k: DEFAULT_RETRIEVAL_K,
            mrr_window: MRR_WINDOW,
            retrieval_pool: 5000,
        }
    }
}

/// Rejects keys that look like inline credentials.
fn check_no_secrets(value: &toml::Value, path: &str) -> anyhow::Result<()> {
    if let toml::Value::Table(table) = value {
        for (key, v) in table {
            let lower = key.to_ascii_lowercase();
            let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
            let looks_secret = ["api_key", "apikey", "secret", "token", "password"]
                .iter()
                .any(|s| lower.contains(s))
                && !lower.ends_with("_env")
                && lower != "max_output_tokens";
            if looks_secret {
                bail!("{here}: credentials are read from environment variables, not the config file");
            }
            check_no_secrets(v, &here)?;
        }
    }
    Ok(())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let value: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        check_no_secrets(&value, "")?;
        Ok(toml::from_str(text)?)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        self.sources.conceptnet.iter_mut().for_each(fix);
        self.sources.wikidata.iter_mut().for_each(fix);
        self.dataset.external.iter_mut().for_each(fix);
        if let Some(p) = self.llm.transcript.as_mut() {
            fix(p);
        }
        if let Some(p) = self.link.aliases.as_mut() {
            fix(p);
        }
        if let Some(p) = self.embedding.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.curation.static_dir.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the resolved config next to the stage outputs.
    pub fn write_snapshot(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_fixed_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.ingest.min_weight, 2.0);
        assert_eq!(c.link.candidate_k, 20);
        assert_eq!(c.eval.retrieval_k, 8);
        assert_eq!(c.eval.mrr_window, 10);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let c = PipelineConfig::parse("seed = 7\n[link]\ncandidate_k = 5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.link.candidate_k, 5);
        assert_eq!(c.eval.retrieval_k, 8);
    }

    #[test]
    fn inline_keys_rejected() {
        let err = PipelineConfig::parse("[llm]\napi_key = \"sk-123\"\n").unwrap_err();
        assert!(err.to_string().contains("environment"));
        assert!(PipelineConfig::parse("[llm]\napi_key_env = \"MY_KEY\"\n").is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::parse("[link]\ncandidate = 5\n").is_err());
    }
}
