//! The reasoning-backend boundary.
//!
//! Prompt templates are rendered with [`render_prompt`], sent to a
//! [`Backend`] through a [`Reasoner`] (which logs every exchange and meters
//! latency), and the raw completion is recovered into a typed verdict by the
//! parsers in [`verdict`].

pub mod backend;
pub mod literal;
pub mod verdict;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use backend::{
    Backend, DelayedBackend, FnBackend, LiveBackend, LiveConfig, RecordingBackend, ScriptTable, ScriptedBackend,
};
pub use verdict::{
    parse_structured, BindingAction, BindingDecision, ConsolidationVerdict, ContentItem, FactBody,
    InitStory, JudgeLabel, PatternSpec, SemanticItem, StoryChoice, Substory, Verdict,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReasonerError {
    #[error("missing template binding `{0}`")]
    MissingBinding(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("no script entry for {kind} prompt (digest {digest})")]
    ScriptMiss { kind: PromptKind, digest: String },
    #[error("no recoverable literal in completion: {0}")]
    ParseFailure(String),
    #[error("completion has the wrong shape: {0}")]
    SchemaMismatch(String),
}

impl ReasonerError {
    /// Transport-level failures that end a replay. Parse problems do not.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            ReasonerError::BackendUnavailable(_)
                | ReasonerError::Timeout { .. }
                | ReasonerError::ScriptMiss { .. }
                | ReasonerError::MissingBinding(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    StoryInit,
    MemoryBinding,
    Consolidation,
    Semanticization,
    CoherenceRetrieve,
    GraphQueryTranslate,
    Answer,
    Judge,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        PromptKind::StoryInit,
        PromptKind::MemoryBinding,
        PromptKind::Consolidation,
        PromptKind::Semanticization,
        PromptKind::CoherenceRetrieve,
        PromptKind::GraphQueryTranslate,
        PromptKind::Answer,
        PromptKind::Judge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::StoryInit => "story_init",
            PromptKind::MemoryBinding => "memory_binding",
            PromptKind::Consolidation => "consolidation",
            PromptKind::Semanticization => "semanticization",
            PromptKind::CoherenceRetrieve => "coherence_retrieve",
            PromptKind::GraphQueryTranslate => "graph_query_translate",
            PromptKind::Answer => "answer",
            PromptKind::Judge => "judge",
        }
    }

    pub fn template(&self) -> &'static str {
        match self {
            PromptKind::StoryInit => include_str!("templates/story_init.txt"),
            PromptKind::MemoryBinding => include_str!("templates/memory_binding.txt"),
            PromptKind::Consolidation => include_str!("templates/consolidation.txt"),
            PromptKind::Semanticization => include_str!("templates/semanticization.txt"),
            PromptKind::CoherenceRetrieve => include_str!("templates/coherence_retrieve.txt"),
            PromptKind::GraphQueryTranslate => include_str!("templates/graph_query_translate.txt"),
            PromptKind::Answer => include_str!("templates/answer.txt"),
            PromptKind::Judge => include_str!("templates/judge.txt"),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown prompt kind `{s}`"))
    }
}

pub type Bindings = BTreeMap<String, String>;

/// Builds a binding map from `(name, value)` pairs.
pub fn bindings<I, K, V>(pairs: I) -> Bindings
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

enum Placeholder<'a> {
    Name(&'a str),
    /// `{value if cond else "fallback"}`
    Conditional { value: &'a str, cond: &'a str, fallback: &'a str },
}

fn parse_placeholder(expr: &str) -> Placeholder<'_> {
    let expr = expr.trim();
    if let Some((value, rest)) = expr.split_once(" if ") {
        if let Some((cond, fallback)) = rest.split_once(" else ") {
            let fallback = fallback.trim();
            let fallback = fallback
                .strip_prefix('"')
                .and_then(|f| f.strip_suffix('"'))
                .unwrap_or(fallback);
            return Placeholder::Conditional { value: value.trim(), cond: cond.trim(), fallback };
        }
    }
    Placeholder::Name(expr)
}

/// Names every placeholder in a template refers to.
pub fn placeholders(kind: PromptKind) -> Vec<String> {
    let mut out = Vec::new();
    let t = kind.template();
    let mut rest = t;
    while let Some(i) = rest.find('{') {
        if rest[i..].starts_with("{{") {
            rest = &rest[i + 2..];
            continue;
        }
        let Some(j) = rest[i..].find('}') else { break };
        match parse_placeholder(&rest[i + 1..i + j]) {
            Placeholder::Name(n) => out.push(n.to_string()),
            Placeholder::Conditional { value, cond, .. } => {
                out.push(value.to_string());
                out.push(cond.to_string());
            }
        }
        rest = &rest[i + j + 1..];
    }
    out.dedup();
    out
}

/// Substitutes bindings into the template for `kind`, f-string style.
pub fn render_prompt(kind: PromptKind, inputs: &Bindings) -> Result<String, ReasonerError> {
    render_template(kind.template(), inputs)
}

pub fn render_template(template: &str, inputs: &Bindings) -> Result<String, ReasonerError> {
    let get = |name: &str| {
        inputs
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| ReasonerError::MissingBinding(name.to_string()))
    };
    let mut out = String::with_capacity(template.len() + 256);
    let mut chars = template.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if template[i..].starts_with("{{") => {
                chars.next();
                out.push('{');
            }
            '}' if template[i..].starts_with("}}") => {
                chars.next();
                out.push('}');
            }
            '\\' if template[i..].starts_with("\\\"") => {
                chars.next();
                out.push('"');
            }
            '{' => {
                let Some(len) = template[i..].find('}') else {
                    out.push('{');
                    continue;
                };
                let expr = &template[i + 1..i + len];
                match parse_placeholder(expr) {
                    Placeholder::Name(n) => out.push_str(get(n)?),
                    Placeholder::Conditional { value, cond, fallback } => {
                        if get(cond)?.trim().is_empty() {
                            out.push_str(fallback);
                        } else {
                            out.push_str(get(value)?);
                        }
                    }
                }
                while let Some(&(j, _)) = chars.peek() {
                    if j > i + len {
                        break;
                    }
                    chars.next();
                }
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

/// Hex SHA-256 of the rendered prompt; the scripted backend's lookup key.
pub fn digest(rendered: &str) -> String {
    hex::encode(Sha256::digest(rendered.as_bytes()))
}

/// What a backend receives for one call.
#[derive(Debug, Clone)]
pub struct PromptRequest {
    pub kind: PromptKind,
    pub bindings: Bindings,
    pub rendered: String,
    pub digest: String,
}

impl PromptRequest {
    pub fn new(kind: PromptKind, bindings: Bindings) -> Result<Self, ReasonerError> {
        let rendered = render_prompt(kind, &bindings)?;
        let digest = digest(&rendered);
        Ok(Self { kind, bindings, rendered, digest })
    }

    pub fn binding(&self, name: &str) -> &str {
        self.bindings.get(name).map(String::as_str).unwrap_or("")
    }
}

/// How call latency is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockMode {
    Wall,
    /// Each backend call costs `per_call_us` plus `per_token_us` per
    /// whitespace token of the rendered prompt. Deterministic.
    Simulated { per_call_us: u64, per_token_us: u64 },
}

impl ClockMode {
    pub fn simulated_default() -> Self {
        ClockMode::Simulated { per_call_us: 150_000, per_token_us: 20 }
    }

    fn call_cost(&self, rendered: &str) -> Duration {
        match self {
            ClockMode::Wall => Duration::ZERO,
            ClockMode::Simulated { per_call_us, per_token_us } => {
                let tokens = rendered.split_whitespace().count() as u64;
                Duration::from_micros(per_call_us + per_token_us * tokens)
            }
        }
    }
}

/// Latency accumulator for one online step or offline tick.
#[derive(Debug, Clone)]
pub struct Meter {
    clock: ClockMode,
    started: Instant,
    simulated: Duration,
}

impl Meter {
    pub fn start(clock: ClockMode) -> Self {
        Self { clock, started: Instant::now(), simulated: Duration::ZERO }
    }

    pub fn add(&mut self, cost: Duration) {
        self.simulated += cost;
    }

    /// Calls issued concurrently cost as much as the slowest one.
    pub fn add_parallel(&mut self, costs: &[Duration]) {
        self.simulated += costs.iter().copied().max().unwrap_or_default();
    }

    pub fn elapsed(&self) -> Duration {
        match self.clock {
            ClockMode::Wall => self.started.elapsed(),
            ClockMode::Simulated { .. } => self.simulated,
        }
    }
}

/// A logged backend exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub kind: PromptKind,
    pub digest: String,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Completed call: backend result plus audit record and simulated cost.
pub struct CallResult {
    pub output: Result<String, ReasonerError>,
    pub exchange: Option<Exchange>,
    pub cost: Duration,
}

/// Shared handle over a backend. Safe for concurrent use.
pub struct Reasoner {
    backend: Arc<dyn Backend>,
    clock: ClockMode,
    log: Mutex<Vec<Exchange>>,
}

impl Reasoner {
    pub fn new(backend: Arc<dyn Backend>, clock: ClockMode) -> Self {
        Self { backend, clock, log: Mutex::new(Vec::new()) }
    }

    pub fn clock(&self) -> ClockMode {
        self.clock
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// Renders and invokes without logging; the caller records the exchange.
    pub fn call_detached(&self, kind: PromptKind, inputs: Bindings) -> CallResult {
        let req = match PromptRequest::new(kind, inputs) {
            Ok(r) => r,
            Err(e) => return CallResult { output: Err(e), exchange: None, cost: Duration::ZERO },
        };
        let output = self.backend.complete(&req);
        let exchange = Exchange {
            kind,
            digest: req.digest.clone(),
            prompt: req.rendered.clone(),
            output: output.as_ref().ok().cloned(),
            error: output.as_ref().err().map(|e| e.to_string()),
        };
        CallResult { output, exchange: Some(exchange), cost: self.clock.call_cost(&req.rendered) }
    }

    pub fn record(&self, exchange: Option<Exchange>) {
        if let Some(ex) = exchange {
            self.log.lock().expect("exchange log poisoned").push(ex);
        }
    }

    /// Render, invoke, log, and charge the meter.
    pub fn call(&self, meter: &mut Meter, kind: PromptKind, inputs: Bindings) -> Result<String, ReasonerError> {
        let res = self.call_detached(kind, inputs);
        meter.add(res.cost);
        self.record(res.exchange);
        res.output
    }

    pub fn take_exchanges(&self) -> Vec<Exchange> {
        std::mem::take(&mut *self.log.lock().expect("exchange log poisoned"))
    }

    pub fn exchange_count(&self) -> usize {
        self.log.lock().expect("exchange log poisoned").len()
    }

    /// Renders the answer template and returns the completion verbatim.
    pub fn answer(
        &self,
        meter: &mut Meter,
        question: &str,
        full_stories: &str,
        add_trivas: &str,
    ) -> Result<String, ReasonerError> {
        let raw = self.call(
            meter,
            PromptKind::Answer,
            bindings([("question", question), ("full_stories", full_stories), ("add_trivas", add_trivas)]),
        )?;
        Ok(raw.trim().to_string())
    }

    pub fn judge(&self, meter: &mut Meter, question: &str, gold: &str, generated: &str) -> Result<JudgeLabel, ReasonerError> {
        let raw = self.call(
            meter,
            PromptKind::Judge,
            bindings([("question", question), ("gold_answer", gold), ("generated_answer", generated)]),
        )?;
        verdict::parse_judge(&raw)
    }
}
