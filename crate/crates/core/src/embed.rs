//! Label embeddings: vectors, cosine similarity, providers and the on-disk cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding has no dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * alpha).collect())
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two raw slices.
pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(u.len(), v.len()));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    cosine_slices(&u.values, &v.values)
}

/// Something that turns text into vectors.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, part of the cache key.
    fn id(&self) -> String;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Offline embedder: signed feature hashing of character n-grams of the
/// lowercased text (with boundary markers) and of its whitespace tokens,
/// L2-normalized. Output is bit-identical across runs and platforms.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    pub ngram: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self { dim: 256, ngram: 3 }
    }
}

impl HashedNgramEmbedder {
    pub fn new(dim: usize, ngram: usize) -> Self {
        assert!(dim > 0 && ngram > 0);
        Self { dim, ngram }
    }

    fn add(&self, values: &mut [f64], feature: &str) {
        let h = fnv1a(feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        values[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let lowered = text.to_lowercase();
        let mut values = vec![0.0; self.dim];
        let marked: Vec<char> = format!("<{lowered}>").chars().collect();
        for gram in marked.windows(self.ngram.min(marked.len())) {
            let gram: String = gram.iter().collect();
            self.add(&mut values, &format!("c:{gram}"));
        }
        for token in lowered.split_whitespace() {
            self.add(&mut values, &format!("w:{token}"));
        }
        let norm = dot(&values, &values).sqrt();
        if norm == 0.0 {
            // every feature cancelled out
            values[(fnv1a(lowered.as_bytes()) % self.dim as u64) as usize] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector { values }
    }
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn id(&self) -> String {
        format!("hashed-ngram-v1-n{}-d{}", self.ngram, self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` endpoint. The key is read from an
/// environment variable at call time.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub retries: u32,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    fn call(&self, texts: &[String]) -> std::result::Result<Vec<EmbeddingVector>, String> {
        let key = std::env::var(&self.api_key_env)
            .map_err(|_| format!("environment variable {} is not set", self.api_key_env))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut resp = agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let mut parsed: EmbeddingResponse =
            resp.body_mut().read_json().map_err(|e| e.to_string())?;
        if parsed.data.len() != texts.len() {
            return Err(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            ));
        }
        parsed.data.sort_by_key(|d| d.index);
        parsed
            .data
            .into_iter()
            .map(|d| EmbeddingVector::new(d.embedding).map_err(|e| e.to_string()))
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote-{}", self.model)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.call(texts) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "embedding request failed");
                    last = e;
                    std::thread::sleep(Duration::from_millis(250 << attempt.min(6)));
                }
            }
        }
        Err(Error::Provider {
            labels: texts.to_vec(),
            reason: last,
        })
    }
}

/// Content-addressed cache: `<dir>/<provider id>/<sha256(text)>.json`.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    provider: String,
    text: String,
    vector: EmbeddingVector,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, provider: &str, text: &str) -> PathBuf {
        let safe: String = provider
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        let digest = hex::encode(Sha256::digest(text.as_bytes()));
        self.dir.join(safe).join(format!("{digest}.json"))
    }

    pub fn get(&self, provider: &str, text: &str) -> Option<EmbeddingVector> {
        let raw = std::fs::read_to_string(self.path(provider, text)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&raw).ok()?;
        (entry.provider == provider && entry.text == text).then_some(entry.vector)
    }

    pub fn put(&self, provider: &str, text: &str, vector: &EmbeddingVector) -> Result<()> {
        let path = self.path(provider, text);
        let parent = path.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let entry = CacheEntry {
            provider: provider.to_string(),
            text: text.to_string(),
            vector: vector.clone(),
        };
        std::fs::write(&path, serde_json::to_vec(&entry)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOptions {
    pub batch_size: usize,
    /// Maximum provider calls in flight at once.
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_in_flight: 4,
        }
    }
}

/// Embeds every unique text once, consulting the cache first.
pub fn embed_texts(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
    opts: &EmbedOptions,
) -> Result<BTreeMap<String, EmbeddingVector>> {
    let provider_id = provider.id();
    let mut out = BTreeMap::new();
    let mut misses = Vec::new();
    for text in texts {
        if out.contains_key(text) || misses.contains(text) {
            continue;
        }
        match cache.and_then(|c| c.get(&provider_id, text)) {
            Some(v) => {
                out.insert(text.clone(), v);
            }
            None => misses.push(text.clone()),
        }
    }
    if misses.is_empty() {
        return Ok(out);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_in_flight.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<(Vec<String>, Result<Vec<EmbeddingVector>>)> = pool.install(|| {
        misses
            .par_chunks(opts.batch_size.max(1))
            .map(|chunk| (chunk.to_vec(), provider.embed_batch(chunk)))
            .collect()
    });
    let mut failed = Vec::new();
    let mut reason = String::new();
    for (chunk, res) in results {
        match res {
            Ok(vectors) if vectors.len() == chunk.len() => {
                for (text, v) in chunk.into_iter().zip(vectors) {
                    if let Some(c) = cache {
                        c.put(&provider_id, &text, &v)?;
                    }
                    out.insert(text, v);
                }
            }
            Ok(vectors) => {
                reason = format!("provider returned {} vectors for {} texts", vectors.len(), chunk.len());
                failed.extend(chunk);
            }
            Err(e) => {
                reason = e.to_string();
                failed.extend(chunk);
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Provider {
            labels: failed,
            reason,
        });
    }
    let dim = out.values().next().map(EmbeddingVector::dim);
    if let Some(bad) = out.values().find(|v| Some(v.dim()) != dim) {
        return Err(Error::DimensionMismatch(dim.unwrap_or(0), bad.dim()));
    }
    Ok(out)
}
