//! The main loop: answer each turn from full history or from memory, then
//! hand the exchange to a background worker that builds and restructures
//! memory.
//!
//! The online path only ever reads the last committed [`MemoryState`]. The
//! offline worker mutates a private copy and publishes it with a pointer
//! swap, so a slow offline tick never delays a response.

mod offline;
pub mod replay;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::episodic::{Activity, BankSnapshot, EpisodicBank, Narrative};
use crate::reasoner::{Backend, ClockMode, Exchange, Meter, PromptKind, Reasoner, ReasonerError};
use crate::render::turn_lines;
use crate::retrieval::{self, CachedEmbedder, HashedBow, RetrievalResult, RetrieverKind};
use crate::semantic::TripleStore;
use crate::transcript::{Turn, WhitespaceCounter};

pub use replay::{replay_to_dir, run_replay, ReplayError, RunArtifact};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsolidationPolicy {
    /// Consolidate a narrative when it goes from Active to Inactive.
    Inactive,
    /// Consolidate every narrative with unconsolidated fragments at every
    /// iteration divisible by `step`, regardless of activity.
    Rapid { step: u64 },
    None,
}

impl fmt::Display for ConsolidationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsolidationPolicy::Inactive => f.write_str("inactive"),
            ConsolidationPolicy::Rapid { step } => write!(f, "rapid:{step}"),
            ConsolidationPolicy::None => f.write_str("none"),
        }
    }
}

impl FromStr for ConsolidationPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inactive" => Ok(ConsolidationPolicy::Inactive),
            "none" => Ok(ConsolidationPolicy::None),
            other => {
                let step = other
                    .strip_prefix("rapid:")
                    .and_then(|n| n.parse::<u64>().ok())
                    .filter(|n| *n > 0)
                    .ok_or_else(|| format!("bad policy `{other}` (expected inactive, none or rapid:<step>)"))?;
                Ok(ConsolidationPolicy::Rapid { step })
            }
        }
    }
}

impl Serialize for ConsolidationPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConsolidationPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Exchanges answered from full history before memory takes over.
    #[serde(rename = "T")]
    pub t: usize,
    pub k: usize,
    /// Consolidation window: the most recent `N` fragments of a narrative.
    #[serde(rename = "N")]
    pub n: usize,
    /// Extra full-history exchanges in buffer mode; 0 disables it.
    #[serde(rename = "B")]
    pub b: usize,
    pub consolidation_policy: ConsolidationPolicy,
    pub binding_context_turns: usize,
    pub retriever: RetrieverKind,
    /// Attach semantic facts to coherence retrieval.
    pub semantic_retrieval: bool,
    pub clock: ClockMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            t: 20,
            k: 2,
            n: 10,
            b: 4,
            consolidation_policy: ConsolidationPolicy::Inactive,
            binding_context_turns: 4,
            retriever: RetrieverKind::Coherence,
            semantic_retrieval: true,
            clock: ClockMode::simulated_default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.t == 0 || self.k == 0 || self.n == 0 || self.binding_context_turns == 0 {
            return Err("T, k, N and binding_context_turns must be positive".into());
        }
        Ok(())
    }

    /// Full-history threshold in exchanges (`T`, or `T + B` in buffer mode).
    pub fn full_context_limit(&self) -> usize {
        self.t + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    FullContext,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Active,
    Inactive,
    Reactivated,
}

/// State a narrative should be in at `current_iteration`: Inactive iff it
/// received nothing in the previous iteration. A stored-Inactive narrative
/// that was bound in the previous iteration is Reactivated.
pub fn activity_transition(n: &Narrative, current_iteration: u64) -> Transition {
    if n.last_bound_iteration + 1 < current_iteration {
        Transition::Inactive
    } else if n.activity == Activity::Inactive {
        Transition::Reactivated
    } else {
        Transition::Active
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    InactiveEdge,
    Rapid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub narrative_id: String,
    pub transition: Transition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidationEvent {
    pub narrative_id: String,
    pub trigger: Trigger,
    /// Absolute half-open fragment window presented to the reasoner.
    pub window: (usize, usize),
    pub subplots_created: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub renamed_to: Option<String>,
    pub facts_inserted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub retriever: RetrieverKind,
    pub k: usize,
    pub selected: Vec<String>,
    pub facts: usize,
    pub retrieved_turn_ids: usize,
    pub retrieved_tokens: usize,
}

impl From<&RetrievalResult> for RetrievalSummary {
    fn from(r: &RetrievalResult) -> Self {
        Self {
            retriever: r.retriever,
            k: r.k,
            selected: r.selections.iter().map(|s| s.leaf.title().to_string()).collect(),
            facts: r.semantic.len(),
            retrieved_turn_ids: r.retrieved_turn_ids.len(),
            retrieved_tokens: r.retrieved_token_count,
        }
    }
}

/// One line of `records.jsonl`. Latencies are microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub turn_id: String,
    pub path: PathKind,
    pub online_latency_us: u64,
    pub offline_latency_us: u64,
    pub mem_init: bool,
    pub bound_fragments: usize,
    pub consolidations: usize,
    pub semanticized: usize,
    /// Whitespace tokens of offline prompts and completions this tick.
    pub offline_tokens: usize,
    pub narratives: usize,
    pub fragments: usize,
    pub subplots: usize,
    pub facts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transitions: Vec<TransitionEvent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub consolidation_events: Vec<ConsolidationEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online_error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offline_errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Committed memory visible to the online path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryState {
    pub bank: EpisodicBank,
    pub store: TripleStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Online,
    Offline,
}

/// A logged exchange tagged with when it happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeLine {
    pub iteration: u64,
    pub phase: Phase,
    #[serde(flatten)]
    pub exchange: Exchange,
}

/// Online half of an iteration.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub response: Turn,
    pub path: PathKind,
    pub online_latency_us: u64,
    pub retrieval: Option<RetrievalResult>,
    pub error: Option<ReasonerError>,
    pub exchanges: Vec<ExchangeLine>,
}

/// Offline half of an iteration, produced by the worker.
#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub iteration: u64,
    pub offline_latency_us: u64,
    pub mem_init: bool,
    pub bound_fragments: usize,
    pub consolidations: usize,
    pub semanticized: usize,
    pub offline_tokens: usize,
    pub transitions: Vec<TransitionEvent>,
    pub consolidation_events: Vec<ConsolidationEvent>,
    pub errors: Vec<String>,
    pub fatal: Option<ReasonerError>,
    pub warnings: Vec<String>,
    pub snapshot: BankSnapshot,
    pub facts: usize,
    pub exchanges: Vec<ExchangeLine>,
}

impl IterationRecord {
    pub fn merge(iteration: u64, q: &Turn, online: &StepOutput, offline: &OfflineOutcome) -> Self {
        let bank = &offline.snapshot.bank;
        Self {
            iteration,
            turn_id: q.turn_id.clone(),
            path: online.path,
            online_latency_us: online.online_latency_us,
            offline_latency_us: offline.offline_latency_us,
            mem_init: offline.mem_init,
            bound_fragments: offline.bound_fragments,
            consolidations: offline.consolidations,
            semanticized: offline.semanticized,
            offline_tokens: offline.offline_tokens,
            narratives: bank.narratives.len(),
            fragments: bank.fragment_total(),
            subplots: bank.narratives.iter().map(|n| n.subplots.len()).sum(),
            facts: offline.facts,
            retrieval: online.retrieval.as_ref().map(RetrievalSummary::from),
            transitions: offline.transitions.clone(),
            consolidation_events: offline.consolidation_events.clone(),
            online_error: online.error.as_ref().map(|e| e.to_string()),
            offline_errors: offline.errors.clone(),
            warnings: offline
                .warnings
                .iter()
                .cloned()
                .chain(online.retrieval.iter().flat_map(|r| r.warnings.iter().cloned()))
                .collect(),
        }
    }
}

pub(crate) struct Job {
    iteration: u64,
    q: Turn,
    r: Turn,
    context: Vec<Turn>,
    init_turns: Option<Vec<Turn>>,
}

type Shared = Arc<RwLock<Arc<MemoryState>>>;

pub struct Engine {
    config: EngineConfig,
    online: Reasoner,
    state: Shared,
    history: Vec<Turn>,
    iteration: u64,
    embedder: CachedEmbedder<HashedBow>,
    tx: Option<Sender<Job>>,
    done: Receiver<OfflineOutcome>,
    pending: usize,
    cancel: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
}

/// Placeholder response text used when the online path fails.
pub const NO_RESPONSE: &str = "(no response)";

impl Engine {
    pub fn new(config: EngineConfig, backend: Arc<dyn Backend>) -> Self {
        let state: Shared = Arc::new(RwLock::new(Arc::new(MemoryState::default())));
        let (tx, rx) = mpsc::channel::<Job>();
        let (done_tx, done) = mpsc::channel();
        let cancel = Arc::new(AtomicBool::new(false));
        let worker = offline::Worker::new(config.clone(), Reasoner::new(backend.clone(), config.clock), state.clone());
        let flag = cancel.clone();
        let handle = std::thread::Builder::new()
            .name("workmem-offline".into())
            .spawn(move || {
                let mut worker = worker;
                while let Ok(job) = rx.recv() {
                    if flag.load(Ordering::Relaxed) {
                        break;
                    }
                    if done_tx.send(worker.tick(job)).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn offline worker");
        Self {
            online: Reasoner::new(backend, config.clock),
            config,
            state,
            history: Vec::new(),
            iteration: 0,
            embedder: CachedEmbedder::new(HashedBow::default()),
            tx: Some(tx),
            done,
            pending: 0,
            cancel,
            worker: Some(handle),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Entries of H: each step adds the query and the response.
    pub fn history(&self) -> &[Turn] {
        &self.history
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Last committed memory.
    pub fn memory(&self) -> Arc<MemoryState> {
        self.state.read().expect("memory lock poisoned").clone()
    }

    /// Answers `q`, appends `q` and the response to H, and queues the
    /// exchange for offline processing. Never waits on offline work.
    pub fn step(&mut self, q: &Turn) -> StepOutput {
        self.iteration += 1;
        let i = self.iteration;
        let h_len = i as usize;
        let mut meter = Meter::start(self.config.clock);
        let prior = self.history.clone();
        self.history.push(q.clone());

        let (path, result) = if h_len <= self.config.full_context_limit() {
            let stories = turn_lines(&prior);
            (PathKind::FullContext, self.online.answer(&mut meter, &q.text, &stories, "").map(|a| (a, None)).map_err(|e| (e, None)))
        } else {
            (PathKind::Memory, self.memory_answer(&mut meter, q, &prior))
        };
        let (text, retrieval, error) = match result {
            Ok((a, r)) if !a.trim().is_empty() => (a, r, None),
            Ok((_, r)) => (NO_RESPONSE.to_string(), r, None),
            Err((e, r)) => (NO_RESPONSE.to_string(), r, Some(e)),
        };
        let response = Turn {
            turn_id: format!("{}r", q.turn_id),
            session_id: q.session_id.clone(),
            speaker: "assistant".into(),
            timestamp: q.timestamp,
            ordinal: q.ordinal,
            text,
        };
        self.history.push(response.clone());
        let online_latency_us = meter.elapsed().as_micros() as u64;
        let exchanges = self
            .online
            .take_exchanges()
            .into_iter()
            .map(|exchange| ExchangeLine { iteration: i, phase: Phase::Online, exchange })
            .collect();

        let t = self.config.t;
        let job = Job {
            iteration: i,
            q: q.clone(),
            r: response.clone(),
            context: prior[prior.len().saturating_sub(self.config.binding_context_turns)..].to_vec(),
            init_turns: (h_len == t + 1).then(|| prior[..(2 * t).min(prior.len())].to_vec()),
        };
        if let Some(tx) = &self.tx {
            if tx.send(job).is_ok() {
                self.pending += 1;
            }
        }
        StepOutput { response, path, online_latency_us, retrieval, error, exchanges }
    }

    #[allow(clippy::type_complexity)]
    fn memory_answer(
        &self,
        meter: &mut Meter,
        q: &Turn,
        prior: &[Turn],
    ) -> Result<(String, Option<RetrievalResult>), (ReasonerError, Option<RetrievalResult>)> {
        let mem = self.memory();
        let counter = WhitespaceCounter;
        let retrieved = match self.config.retriever {
            RetrieverKind::Coherence => {
                let empty = TripleStore::new();
                let store = if self.config.semantic_retrieval { &mem.store } else { &empty };
                retrieval::retrieve_coherence(&mem.bank, store, &self.online, meter, &q.text, self.config.k, &counter)
            }
            RetrieverKind::Embedding => {
                retrieval::retrieve_embedding(&mem.bank, &self.embedder, &q.text, self.config.k, &counter)
            }
        };
        let retrieved = match retrieved {
            Ok(r) => r,
            Err(retrieval::RetrievalError::Reasoner(e)) => return Err((e, None)),
            Err(e) => return Err((ReasonerError::BackendUnavailable(e.to_string()), None)),
        };
        let mut stories = retrieved.render_stories();
        if self.config.b > 0 {
            let buf = &prior[prior.len().saturating_sub(2 * self.config.b)..];
            if !buf.is_empty() {
                if !stories.is_empty() {
                    stories.push_str("\n\n");
                }
                stories.push_str("Recent conversation:\n");
                stories.push_str(&turn_lines(buf));
            }
        }
        match self.online.answer(meter, &q.text, &stories, &retrieved.render_facts()) {
            Ok(a) => Ok((a, Some(retrieved))),
            Err(e) => Err((e, Some(retrieved))),
        }
    }

    /// Offline outcomes finished so far, without blocking.
    pub fn try_collect(&mut self) -> Vec<OfflineOutcome> {
        let mut out = Vec::new();
        while let Ok(o) = self.done.try_recv() {
            self.pending -= 1;
            out.push(o);
        }
        out
    }

    /// Blocks until every queued exchange has been processed.
    pub fn drain(&mut self) -> Vec<OfflineOutcome> {
        let mut out = Vec::new();
        while self.pending > 0 {
            match self.done.recv() {
                Ok(o) => {
                    self.pending -= 1;
                    out.push(o);
                }
                Err(_) => break,
            }
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.pending
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.cancel.store(true, Ordering::Relaxed);
        self.tx.take();
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

/// Offline kinds, for fault injection.
pub const OFFLINE_KINDS: [PromptKind; 4] =
    [PromptKind::StoryInit, PromptKind::MemoryBinding, PromptKind::Consolidation, PromptKind::Semanticization];

#[cfg(test)]
mod tests {
    use super::*;

    fn narrative(last: u64, activity: Activity) -> Narrative {
        Narrative {
            narrative_id: "n001".into(),
            owner: "A".into(),
            characters: vec![],
            headline: "H".into(),
            fragments: vec![],
            subplots: vec![],
            activity,
            last_bound_iteration: last,
            consolidated_through: 0,
        }
    }

    #[test]
    fn transition_rule() {
        assert_eq!(activity_transition(&narrative(10, Activity::Active), 12), Transition::Inactive);
        assert_eq!(activity_transition(&narrative(10, Activity::Active), 11), Transition::Active);
        assert_eq!(activity_transition(&narrative(10, Activity::Inactive), 11), Transition::Reactivated);
    }

    #[test]
    fn policy_strings() {
        for s in ["inactive", "none", "rapid:3"] {
            assert_eq!(s.parse::<ConsolidationPolicy>().unwrap().to_string(), s);
        }
        assert!("rapid:0".parse::<ConsolidationPolicy>().is_err());
        assert!("sometimes".parse::<ConsolidationPolicy>().is_err());
    }

    #[test]
    fn config_defaults_and_json() {
        let c = EngineConfig::default();
        assert_eq!((c.t, c.k, c.n, c.b, c.binding_context_turns), (20, 2, 10, 4, 4));
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["T"], 20);
        assert_eq!(v["consolidation_policy"], "inactive");
        let back: EngineConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        let partial: EngineConfig = serde_json::from_str(r#"{"k": 4, "consolidation_policy": "rapid:2"}"#).unwrap();
        assert_eq!(partial.k, 4);
        assert_eq!(partial.t, 20);
    }
}
