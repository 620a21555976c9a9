//! Completion backends with a record/replay transcript.
//!
//! Every live response is appended to a JSON-lines transcript keyed by the
//! SHA-256 of the prompt. The replay backend answers purely from such a
//! transcript, which makes the filtering stage deterministic.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;

pub trait LlmBackend: Send + Sync {
    fn model(&self) -> &str;

    /// Single-shot completion of `prompt`.
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt_sha256: String,
    pub prompt: String,
    pub response: String,
    pub model: String,
    pub timestamp: String,
}

impl TranscriptEntry {
    pub fn new(prompt: &str, response: &str, model: &str, timestamp: impl Into<String>) -> Self {
        Self {
            prompt_sha256: prompt_sha256(prompt),
            prompt: prompt.to_string(),
            response: response.to_string(),
            model: model.to_string(),
            timestamp: timestamp.into(),
        }
    }
}

/// Serialized appender for transcript entries.
#[derive(Debug)]
pub struct TranscriptWriter {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl TranscriptWriter {
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn append(&self, entry: &TranscriptEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        out.write_all(&line)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Answers from a recorded transcript; a prompt it has never seen is an error.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    model: String,
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_entries(model: impl Into<String>, entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        // later entries win, matching append order
        let responses = entries
            .into_iter()
            .map(|e| (e.prompt_sha256, e.response))
            .collect();
        Self {
            model: model.into(),
            responses,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<TranscriptEntry> = jsonl::read(path)?;
        let model = entries
            .first()
            .map(|e| e.model.clone())
            .unwrap_or_else(|| "replay".to_string());
        Ok(Self::from_entries(model, entries))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LlmBackend for ReplayBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let sha256 = prompt_sha256(prompt);
        self.responses
            .get(&sha256)
            .cloned()
            .ok_or(Error::TranscriptIncomplete { sha256 })
    }
}

/// Answers through a closure and optionally records every answer. Used to
/// script transcripts for fixtures and tests.
pub struct ScriptedBackend<F> {
    model: String,
    script: F,
    transcript: Option<TranscriptWriter>,
}

impl<F> ScriptedBackend<F>
where
    F: Fn(&str) -> Option<String> + Send + Sync,
{
    pub fn new(model: impl Into<String>, script: F) -> Self {
        Self {
            model: model.into(),
            script,
            transcript: None,
        }
    }

    pub fn recording(mut self, writer: TranscriptWriter) -> Self {
        self.transcript = Some(writer);
        self
    }
}

impl<F> LlmBackend for ScriptedBackend<F>
where
    F: Fn(&str) -> Option<String> + Send + Sync,
{
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let response = (self.script)(prompt).ok_or_else(|| Error::TranscriptIncomplete {
            sha256: prompt_sha256(prompt),
        })?;
        if let Some(w) = &self.transcript {
            w.append(&TranscriptEntry::new(prompt, &response, &self.model, "scripted"))?;
        }
        Ok(response)
    }
}

/// OpenAI-compatible `/completions` endpoint.
#[derive(Debug)]
pub struct RemoteBackend {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub api_key_env: String,
    pub retries: u32,
    pub timeout: Duration,
    pub transcript: Option<TranscriptWriter>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

impl RemoteBackend {
    fn call(&self, prompt: &str) -> std::result::Result<String, String> {
        let key = std::env::var(&self.api_key_env)
            .map_err(|_| format!("environment variable {} is not set", self.api_key_env))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::json!({
            "model": self.model,
            "prompt": prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        });
        let mut resp = agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let parsed: CompletionResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| "response has no choices".to_string())
    }
}

impl LlmBackend for RemoteBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.call(prompt) {
                Ok(text) => {
                    if let Some(w) = &self.transcript {
                        let ts = chrono::Utc::now().to_rfc3339();
                        w.append(&TranscriptEntry::new(prompt, &text, &self.model, ts))?;
                    }
                    return Ok(text);
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "completion request failed");
                    last = e;
                    std::thread::sleep(Duration::from_millis(250 << attempt.min(6)));
                }
            }
        }
        Err(Error::Backend {
            attempts: self.retries + 1,
            reason: last,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Replay,
}

/// Declarative backend configuration. The API key is only ever read from
/// the environment variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmBackendSpec {
    pub kind: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub transcript: Option<PathBuf>,
    pub endpoint: String,
    pub api_key_env: String,
    pub retries: u32,
    pub timeout_secs: u64,
}

impl Default for LlmBackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Replay,
            model: "text-davinci-003".to_string(),
            temperature: 0.0,
            max_output_tokens: 64,
            transcript: None,
            endpoint: "https://api.openai.com/v1/completions".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            retries: 3,
            timeout_secs: 60,
        }
    }
}

impl LlmBackendSpec {
    pub fn build(&self) -> Result<Box<dyn LlmBackend>> {
        match self.kind {
            BackendKind::Replay => {
                let path = self.transcript.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("replay backend needs a transcript path".into())
                })?;
                Ok(Box::new(ReplayBackend::load(path)?))
            }
            BackendKind::Remote => Ok(Box::new(RemoteBackend {
                endpoint: self.endpoint.clone(),
                model: self.model.clone(),
                temperature: self.temperature,
                max_output_tokens: self.max_output_tokens,
                api_key_env: self.api_key_env.clone(),
                retries: self.retries,
                timeout: Duration::from_secs(self.timeout_secs),
                transcript: self
                    .transcript
                    .as_deref()
                    .map(TranscriptWriter::append_to)
                    .transpose()?,
            })),
        }
    }
}
