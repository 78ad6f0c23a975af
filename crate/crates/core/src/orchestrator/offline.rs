//! The background worker: one tick per exchange, strictly in order.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::Arc;

use chrono::NaiveDateTime;
use tracing::{debug, warn};

use super::{
    activity_transition, ConsolidationEvent, ConsolidationPolicy, EngineConfig, ExchangeLine, Job, MemoryState,
    OfflineOutcome, Phase, Shared, Transition, TransitionEvent, Trigger,
};
use crate::episodic::{Activity, MemoryFragment, Narrative};
use crate::reasoner::verdict::{parse_binding, parse_consolidation, parse_semanticization, parse_story_init};
use crate::reasoner::{bindings, FactBody, Meter, PromptKind, Reasoner, ReasonerError, SemanticItem};
use crate::render::{turn_lines, turn_tags, word_tokens};
use crate::retrieval::binding_story_list;
use crate::semantic::TripleFact;
use crate::transcript::{format_datetime, parse_datetime};

pub(super) struct Worker {
    config: EngineConfig,
    reasoner: Reasoner,
    shared: Shared,
    local: Arc<MemoryState>,
    fatal: Option<ReasonerError>,
}

/// Predicate used for facts the reasoner returned as free text.
pub const TEXT_FACT_PREDICATE: &str = "noted";

impl Worker {
    pub(super) fn new(config: EngineConfig, reasoner: Reasoner, shared: Shared) -> Self {
        let local = shared.read().expect("memory lock poisoned").clone();
        Self { config, reasoner, shared, local, fatal: None }
    }

    fn empty_outcome(&self, iteration: u64, at: NaiveDateTime) -> OfflineOutcome {
        OfflineOutcome {
            iteration,
            offline_latency_us: 0,
            mem_init: false,
            bound_fragments: 0,
            consolidations: 0,
            semanticized: 0,
            offline_tokens: 0,
            transitions: Vec::new(),
            consolidation_events: Vec::new(),
            errors: Vec::new(),
            fatal: None,
            warnings: Vec::new(),
            snapshot: self.local.bank.snapshot(Some(at)),
            facts: self.local.store.len(),
            exchanges: Vec::new(),
        }
    }

    /// Splits a failure into fatal (remembered, ends further work) and
    /// per-item (recorded, work continues).
    fn absorb(&mut self, out: &mut OfflineOutcome, what: &str, e: ReasonerError) {
        let msg = format!("{what}: {e}");
        warn!(iteration = out.iteration, "{msg}");
        out.errors.push(msg);
        if e.is_fatal() && self.fatal.is_none() {
            self.fatal = Some(e.clone());
            out.fatal = Some(e);
        }
    }

    pub(super) fn tick(&mut self, job: Job) -> OfflineOutcome {
        let i = job.iteration;
        let mut out = self.empty_outcome(i, job.q.timestamp);
        if let Some(e) = &self.fatal {
            out.errors.push(format!("skipped after earlier fatal error: {e}"));
            return out;
        }
        let mut meter = Meter::start(self.config.clock);
        Arc::make_mut(&mut self.local).bank.iteration_counter = i;

        if i as usize > self.config.t {
            if let Some(init) = &job.init_turns {
                out.mem_init = true;
                self.mem_init(&mut meter, &mut out, init);
            }
            if self.fatal.is_none() {
                self.mem_binding(&mut meter, &mut out, &job);
            }
            if self.fatal.is_none() {
                let edges = self.activity(&mut out, i);
                let targets = match self.config.consolidation_policy {
                    ConsolidationPolicy::Inactive => edges.into_iter().map(|id| (id, Trigger::InactiveEdge)).collect(),
                    ConsolidationPolicy::Rapid { step } if i % step == 0 => self
                        .local
                        .bank
                        .narratives
                        .iter()
                        .filter(|n| !n.consolidation_window(self.config.n).is_empty())
                        .map(|n| (n.narrative_id.clone(), Trigger::Rapid))
                        .collect(),
                    _ => Vec::new(),
                };
                for (id, trigger) in targets {
                    if self.fatal.is_some() {
                        break;
                    }
                    self.consolidate(&mut meter, &mut out, &id, trigger);
                }
            }
        }

        out.snapshot = self.local.bank.snapshot(Some(job.q.timestamp));
        out.facts = self.local.store.len();
        out.offline_latency_us = meter.elapsed().as_micros() as u64;
        out.exchanges = self
            .reasoner
            .take_exchanges()
            .into_iter()
            .map(|exchange| ExchangeLine { iteration: i, phase: Phase::Offline, exchange })
            .collect();
        out.offline_tokens = out
            .exchanges
            .iter()
            .map(|x| {
                x.exchange.prompt.split_whitespace().count()
                    + x.exchange.output.as_deref().map_or(0, |o| o.split_whitespace().count())
            })
            .sum();
        *self.shared.write().expect("memory lock poisoned") = self.local.clone();
        debug!(iteration = i, bound = out.bound_fragments, consolidations = out.consolidations, "offline tick committed");
        out
    }

    fn mem_init(&mut self, meter: &mut Meter, out: &mut OfflineOutcome, init: &[crate::transcript::Turn]) {
        let raw = self.reasoner.call(meter, PromptKind::StoryInit, bindings([("conv", turn_lines(init))]));
        let stories = match raw.and_then(|r| parse_story_init(&r)) {
            Ok(s) => s,
            Err(e) => return self.absorb(out, "memory initialisation", e),
        };
        let state = Arc::make_mut(&mut self.local);
        match state.bank.apply_init(&stories, init) {
            Ok(o) => {
                out.bound_fragments += o.bound;
                out.warnings.extend(o.warnings);
            }
            Err(e) => out.errors.push(format!("memory initialisation: {e}")),
        }
    }

    fn mem_binding(&mut self, meter: &mut Meter, out: &mut OfflineOutcome, job: &Job) {
        let context = if job.context.is_empty() { "None.".to_string() } else { turn_lines(&job.context) };
        let new_turns = [job.q.clone(), job.r.clone()];
        let inputs = bindings([
            ("headlines", binding_story_list(&self.local.bank)),
            ("recent_context", context),
            ("new_conv", turn_lines(&new_turns)),
        ]);
        let raw = self.reasoner.call(meter, PromptKind::MemoryBinding, inputs);
        let decisions = match raw.and_then(|r| parse_binding(&r)) {
            Ok(d) => d,
            Err(e) => return self.absorb(out, "memory binding", e),
        };
        let state = Arc::make_mut(&mut self.local);
        let o = state.bank.apply_binding(&decisions, &new_turns);
        out.bound_fragments += o.bound;
        out.warnings.extend(o.warnings);
        for id in o.reactivated {
            out.transitions.push(TransitionEvent { narrative_id: id, transition: Transition::Reactivated });
        }
    }

    /// Applies the inactivity rule after binding at iteration `i`; returns
    /// narratives that just went from Active to Inactive.
    fn activity(&mut self, out: &mut OfflineOutcome, i: u64) -> Vec<String> {
        let state = Arc::make_mut(&mut self.local);
        let mut edges = Vec::new();
        for n in &mut state.bank.narratives {
            if activity_transition(n, i + 1) == Transition::Inactive && n.activity == Activity::Active {
                n.activity = Activity::Inactive;
                out.transitions.push(TransitionEvent { narrative_id: n.narrative_id.clone(), transition: Transition::Inactive });
                edges.push(n.narrative_id.clone());
            }
        }
        edges
    }

    fn consolidate(&mut self, meter: &mut Meter, out: &mut OfflineOutcome, id: &str, trigger: Trigger) {
        let Some(n) = self.local.bank.get(id) else { return };
        let window = n.consolidation_window(self.config.n);
        if window.is_empty() {
            return;
        }
        let items = items_text(n, window.clone());
        let mut event = ConsolidationEvent {
            narrative_id: id.to_string(),
            trigger,
            window: (window.start, window.end),
            subplots_created: 0,
            renamed_to: None,
            facts_inserted: 0,
            error: None,
        };
        out.consolidations += 1;

        let raw = self.reasoner.call(meter, PromptKind::Consolidation, topic_bindings(n, &items));
        match raw.and_then(|r| parse_consolidation(&r)) {
            Ok(verdict) => {
                let state = Arc::make_mut(&mut self.local);
                match state.bank.apply_consolidation(id, window.clone(), &verdict) {
                    Ok(o) => {
                        event.subplots_created = o.subplots_created;
                        event.renamed_to = o.renamed_to;
                        out.warnings.extend(o.warnings);
                    }
                    Err(e) => event.error = Some(e.to_string()),
                }
            }
            Err(e) => {
                event.error = Some(e.to_string());
                self.absorb(out, &format!("consolidation of {id}"), e);
            }
        }
        if self.fatal.is_some() {
            out.consolidation_events.push(event);
            return;
        }

        let n = self.local.bank.get(id).expect("narrative still present");
        let raw = self.reasoner.call(meter, PromptKind::Semanticization, topic_bindings(n, &items));
        match raw.and_then(|r| parse_semanticization(&r)) {
            Ok(facts) => {
                let triples: Vec<TripleFact> = facts.iter().map(|f| to_triple(n, window.clone(), f)).collect();
                let state = Arc::make_mut(&mut self.local);
                match state.store.insert_facts(triples) {
                    Ok(added) => {
                        event.facts_inserted = added;
                        out.semanticized += added;
                    }
                    Err(e) => out.errors.push(format!("semantic store: {e}")),
                }
            }
            Err(e) => {
                event.error.get_or_insert_with(|| e.to_string());
                self.absorb(out, &format!("semanticization of {id}"), e);
            }
        }
        out.consolidation_events.push(event);
    }
}

fn fragment_line(idx: usize, f: &MemoryFragment) -> String {
    let ids: Vec<&str> = f.source_turn_ids.iter().map(String::as_str).collect();
    format!("{idx}. [{}] ({}) {}: {}", ids.join(", "), format_datetime(&f.timestamp), f.speaker, f.content)
}

/// Window fragments numbered from 0, as the consolidation prompt expects.
pub fn items_text(n: &Narrative, window: Range<usize>) -> String {
    n.fragments[window].iter().enumerate().map(|(i, f)| fragment_line(i, f)).collect::<Vec<_>>().join("\n")
}

fn topic_bindings(n: &Narrative, items: &str) -> crate::reasoner::Bindings {
    let subs: String = n.subplots.iter().map(|s| format!("- {}", s.sub_headline)).collect::<Vec<_>>().join("\n");
    bindings([
        ("main_topic", n.headline.clone()),
        ("substories_text", subs.clone()),
        ("substories", subs),
        ("new_items_text", items.to_string()),
    ])
}

/// Builds a triple from a semanticization item. Provenance comes from turn
/// tags in the item where present, otherwise from the window fragment with
/// the largest word overlap (the last one if nothing overlaps).
pub fn to_triple(n: &Narrative, window: Range<usize>, item: &SemanticItem) -> TripleFact {
    let (subject, predicate, object) = match &item.fact {
        FactBody::Triple { subject, predicate, object } => (subject.clone(), predicate.clone(), object.clone()),
        FactBody::Text(t) => (n.owner.clone(), TEXT_FACT_PREDICATE.to_string(), t.clone()),
    };
    let frags = &n.fragments[window];
    let ts_text = item.timestamp.clone().unwrap_or_default();
    let fact_text = format!("{subject} {predicate} {object} {ts_text}");

    let tags = turn_tags(&fact_text);
    let tagged: Vec<&MemoryFragment> =
        frags.iter().filter(|f| f.source_turn_ids.iter().any(|id| tags.contains(id))).collect();
    let chosen: Vec<&MemoryFragment> = if !tagged.is_empty() {
        tagged
    } else {
        let words: BTreeSet<String> = word_tokens(&fact_text).into_iter().collect();
        let mut best: Option<(&MemoryFragment, usize)> = None;
        for f in frags {
            let w: BTreeSet<String> = word_tokens(&f.content).into_iter().collect();
            let overlap = words.intersection(&w).count();
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((f, overlap));
            }
        }
        best.filter(|(_, o)| *o > 0).map(|(f, _)| vec![f]).unwrap_or_else(|| frags.last().into_iter().collect())
    };
    let timestamp = parse_datetime(&ts_text)
        .or_else(|| chosen.iter().map(|f| f.timestamp).max())
        .unwrap_or_else(|| n.fragments.last().map(|f| f.timestamp).unwrap_or_default());
    TripleFact {
        subject,
        predicate,
        object,
        timestamp,
        source_narrative_id: n.narrative_id.clone(),
        source_turn_ids: chosen.iter().flat_map(|f| f.source_turn_ids.iter().cloned()).collect(),
    }
}
