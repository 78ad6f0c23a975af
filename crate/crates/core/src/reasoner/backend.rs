//! Backend implementations: scripted table lookup, recording wrapper, live
//! chat-completion client, and a closure adapter for tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{PromptKind, PromptRequest, ReasonerError};

pub trait Backend: Send + Sync {
    fn complete(&self, req: &PromptRequest) -> Result<String, ReasonerError>;

    fn name(&self) -> &str {
        "backend"
    }
}

/// Script table file: `{"version": 1, "entries": {kind: {digest: output}},
/// "defaults": {kind: output}}`. The digest is the hex SHA-256 of the
/// rendered prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTable {
    #[serde(default = "ScriptTable::version")]
    pub version: u32,
    #[serde(default)]
    pub entries: BTreeMap<PromptKind, BTreeMap<String, String>>,
    /// Served when no digest entry matches. Optional per kind.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub defaults: BTreeMap<PromptKind, String>,
}

impl ScriptTable {
    fn version() -> u32 {
        1
    }

    pub fn new() -> Self {
        Self { version: 1, ..Default::default() }
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        fs::write(path, s)
    }

    pub fn insert(&mut self, kind: PromptKind, digest: impl Into<String>, output: impl Into<String>) {
        self.entries.entry(kind).or_default().insert(digest.into(), output.into());
    }

    pub fn set_default(&mut self, kind: PromptKind, output: impl Into<String>) {
        self.defaults.insert(kind, output.into());
    }

    pub fn get(&self, kind: PromptKind, digest: &str) -> Option<&str> {
        self.entries
            .get(&kind)
            .and_then(|m| m.get(digest))
            .or_else(|| self.defaults.get(&kind))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0 && self.defaults.is_empty()
    }
}

pub struct ScriptedBackend {
    table: ScriptTable,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &ScriptTable {
        &self.table
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String, ReasonerError> {
        match self.table.get(req.kind, &req.digest) {
            Some(out) => Ok(out.to_string()),
            None => Err(ReasonerError::ScriptMiss { kind: req.kind, digest: req.digest.clone() }),
        }
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Passes calls through and captures every successful output into a table
/// that a [`ScriptedBackend`] can replay.
pub struct RecordingBackend<B> {
    inner: B,
    table: Mutex<ScriptTable>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, table: Mutex::new(ScriptTable::new()) }
    }

    pub fn table(&self) -> ScriptTable {
        self.table.lock().expect("recording table poisoned").clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, req: &PromptRequest) -> Result<String, ReasonerError> {
        let out = self.inner.complete(req)?;
        self.table
            .lock()
            .expect("recording table poisoned")
            .insert(req.kind, req.digest.clone(), out.clone());
        Ok(out)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Adapts a closure; handy for fault injection.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&PromptRequest) -> Result<String, ReasonerError> + Send + Sync,
{
    fn complete(&self, req: &PromptRequest) -> Result<String, ReasonerError> {
        (self.0)(req)
    }

    fn name(&self) -> &str {
        "fn"
    }
}

/// Wraps a backend and sleeps before answering prompts of the listed kinds.
pub struct DelayedBackend<B> {
    inner: B,
    kinds: Vec<PromptKind>,
    delay: Duration,
}

impl<B: Backend> DelayedBackend<B> {
    pub fn new(inner: B, kinds: impl IntoIterator<Item = PromptKind>, delay: Duration) -> Self {
        Self { inner, kinds: kinds.into_iter().collect(), delay }
    }
}

impl<B: Backend> Backend for DelayedBackend<B> {
    fn complete(&self, req: &PromptRequest) -> Result<String, ReasonerError> {
        if self.kinds.contains(&req.kind) {
            std::thread::sleep(self.delay);
        }
        self.inner.complete(req)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Full chat-completions URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "LiveConfig::default_key_env")]
    pub api_key_env: String,
    #[serde(default = "LiveConfig::default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "LiveConfig::default_retries")]
    pub max_retries: u32,
}

impl LiveConfig {
    pub const DEFAULT_KEY_ENV: &'static str = "WORKMEM_API_KEY";

    fn default_key_env() -> String {
        Self::DEFAULT_KEY_ENV.to_string()
    }
    fn default_timeout_ms() -> u64 {
        60_000
    }
    fn default_retries() -> u32 {
        2
    }

    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: Self::default_key_env(),
            timeout_ms: Self::default_timeout_ms(),
            max_retries: Self::default_retries(),
        }
    }
}

/// OpenAI-style chat-completion client. One user message per call,
/// temperature 0. Only transport failures, 429 and 5xx are retried.
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

enum Attempt {
    Retry(ReasonerError),
    Fail(ReasonerError),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, ReasonerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ReasonerError::BackendUnavailable(e.to_string()))?;
        let token = std::env::var(&config.api_key_env).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            warn!(var = %config.api_key_env, "no API token in environment; sending unauthenticated requests");
        }
        Ok(Self { config, client, token })
    }

    fn attempt(&self, prompt: &str) -> Result<String, Attempt> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut rb = self.client.post(&self.config.endpoint).json(&body);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(ReasonerError::Timeout { attempts: 1 })
            } else {
                Attempt::Retry(ReasonerError::BackendUnavailable(e.to_string()))
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(ReasonerError::BackendUnavailable(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            return Err(Attempt::Fail(ReasonerError::BackendUnavailable(format!("HTTP {status}"))));
        }
        let v: Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(ReasonerError::Timeout { attempts: 1 })
            } else {
                Attempt::Fail(ReasonerError::BackendUnavailable(format!("bad response body: {e}")))
            }
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fail(ReasonerError::BackendUnavailable("response lacks choices[0].message.content".into())))
    }
}

impl Backend for LiveBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String, ReasonerError> {
        let attempts = self.config.max_retries + 1;
        let mut last = ReasonerError::BackendUnavailable("no attempt made".into());
        for n in 1..=attempts {
            match self.attempt(&req.rendered) {
                Ok(out) => return Ok(out),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    debug!(kind = %req.kind, attempt = n, error = %e, "transient backend failure");
                    last = e;
                }
            }
        }
        Err(match last {
            ReasonerError::Timeout { .. } => ReasonerError::Timeout { attempts },
            other => other,
        })
    }

    fn name(&self) -> &str {
        "live"
    }
}
