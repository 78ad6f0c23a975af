//! Answer-time memory selection.
//!
//! The coherence retriever asks the reasoner to pick at most `k` leaves
//! (plot or subplot headlines) and, concurrently, to translate the question
//! into triple patterns. The embedding retriever ranks the same leaves by
//! cosine similarity and never touches semantic memory.

pub mod embedding;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use embedding::{cosine, CachedEmbedder, EmbeddingProvider, HashedBow, LiveEmbedding};

use crate::episodic::{EpisodicBank, MemoryFragment, Narrative};
use crate::reasoner::verdict::{parse_choices, parse_patterns};
use crate::reasoner::{bindings, Meter, PromptKind, Reasoner, ReasonerError};
use crate::render::normalize_ws;
use crate::semantic::{normalize, TripleFact, TriplePattern, TripleStore};
use crate::transcript::{format_datetime, TokenCounter};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error("embedding provider: {0}")]
    Provider(String),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    Coherence,
    Embedding,
}

impl FromStr for RetrieverKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coherence" => Ok(RetrieverKind::Coherence),
            "embedding" => Ok(RetrieverKind::Embedding),
            other => Err(format!("unknown retriever `{other}` (expected coherence or embedding)")),
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrieverKind::Coherence => "coherence",
            RetrieverKind::Embedding => "embedding",
        })
    }
}

/// A selectable unit: a whole narrative or one subplot block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leaf {
    pub narrative_id: String,
    pub owner: String,
    pub headline: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sub_headline: Option<String>,
    pub start: usize,
    pub end: usize,
}

impl Leaf {
    pub fn title(&self) -> &str {
        self.sub_headline.as_deref().unwrap_or(&self.headline)
    }
}

/// All leaves in bank order: each plot followed by its subplots.
pub fn leaves(bank: &EpisodicBank) -> Vec<Leaf> {
    let mut out = Vec::new();
    for n in &bank.narratives {
        out.push(Leaf {
            narrative_id: n.narrative_id.clone(),
            owner: n.owner.clone(),
            headline: n.headline.clone(),
            sub_headline: None,
            start: 0,
            end: n.fragments.len(),
        });
        for s in &n.subplots {
            out.push(Leaf {
                narrative_id: n.narrative_id.clone(),
                owner: n.owner.clone(),
                headline: n.headline.clone(),
                sub_headline: Some(s.sub_headline.clone()),
                start: s.start,
                end: s.end,
            });
        }
    }
    out
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// The story list shown to the binding prompt.
pub fn binding_story_list(bank: &EpisodicBank) -> String {
    if bank.is_empty() {
        return "None.".into();
    }
    bank.narratives
        .iter()
        .map(|n| format!("- {{\"owner\": {}, \"topic\": {}}}", quoted(&n.owner), quoted(&n.headline)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The story list shown to the coherence prompt, sub-stories nested.
pub fn coherence_story_list(bank: &EpisodicBank) -> String {
    let mut lines = Vec::new();
    for n in &bank.narratives {
        lines.push(format!("- {{\"owner\": {}, \"topic\": {}}}", quoted(&n.owner), quoted(&n.headline)));
        for s in &n.subplots {
            lines.push(format!("    - sub-story: {{\"owner\": {}, \"topic\": {}}}", quoted(&n.owner), quoted(&s.sub_headline)));
        }
    }
    lines.join("\n")
}

/// Exact `(owner, topic)` lookup: plot headlines first, then subplots.
pub fn resolve_choice(bank: &EpisodicBank, owner: &str, topic: &str) -> Option<Leaf> {
    let (owner, topic) = (normalize_ws(owner), normalize_ws(topic));
    let all = leaves(bank);
    all.iter()
        .find(|l| l.sub_headline.is_none() && l.owner == owner && l.headline == topic)
        .or_else(|| all.iter().find(|l| l.owner == owner && l.sub_headline.as_deref() == Some(topic.as_str())))
        .cloned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    #[serde(flatten)]
    pub leaf: Leaf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedStory {
    pub narrative_id: String,
    pub owner: String,
    pub headline: String,
    pub fragments: Vec<MemoryFragment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub retriever: RetrieverKind,
    pub k: usize,
    /// Chosen leaves, at most `k`, in rank order.
    pub selections: Vec<Selection>,
    /// Selected fragments grouped per narrative, each fragment once.
    pub episodic: Vec<RetrievedStory>,
    /// Semantic facts, at most `k`.
    pub semantic: Vec<TripleFact>,
    pub retrieved_turn_ids: BTreeSet<String>,
    pub retrieved_token_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patterns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RetrievalResult {
    pub fn empty(retriever: RetrieverKind, k: usize) -> Self {
        Self {
            retriever,
            k,
            selections: Vec::new(),
            episodic: Vec::new(),
            semantic: Vec::new(),
            retrieved_turn_ids: BTreeSet::new(),
            retrieved_token_count: 0,
            patterns: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn top_headline(&self) -> Option<&str> {
        self.selections.first().map(|s| s.leaf.title())
    }

    /// Fills `episodic`, provenance and token count from `selections` and
    /// `semantic`.
    fn assemble(&mut self, bank: &EpisodicBank, counter: &dyn TokenCounter) {
        let mut chosen: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for s in &self.selections {
            chosen.entry(&s.leaf.narrative_id).or_default().extend(s.leaf.start..s.leaf.end);
        }
        // stories follow first selection rank
        let mut order: Vec<&str> = Vec::new();
        for s in &self.selections {
            if !order.contains(&s.leaf.narrative_id.as_str()) {
                order.push(&s.leaf.narrative_id);
            }
        }
        self.episodic.clear();
        let mut turns = BTreeSet::new();
        let mut tokens = 0;
        for id in order {
            let n: &Narrative = bank.get(id).expect("selection refers to bank narrative");
            let frags: Vec<MemoryFragment> = chosen[id].iter().map(|&i| n.fragments[i].clone()).collect();
            for f in &frags {
                turns.extend(f.source_turn_ids.iter().cloned());
                tokens += counter.count(&f.content);
            }
            self.episodic.push(RetrievedStory {
                narrative_id: n.narrative_id.clone(),
                owner: n.owner.clone(),
                headline: n.headline.clone(),
                fragments: frags,
            });
        }
        for f in &self.semantic {
            turns.extend(f.source_turn_ids.iter().cloned());
            tokens += counter.count(&format!("{} {} {}", f.subject, f.predicate, f.object));
        }
        self.retrieved_turn_ids = turns;
        self.retrieved_token_count = tokens;
    }

    /// `{full_stories}` binding: fragments grouped under their headline.
    pub fn render_stories(&self) -> String {
        let mut out = Vec::new();
        for s in &self.episodic {
            out.push(format!("Story: {} (owner: {})", s.headline, s.owner));
            for f in &s.fragments {
                out.push(format!("  - ({}) {}: {}", format_datetime(&f.timestamp), f.speaker, f.content));
            }
        }
        out.join("\n")
    }

    /// `{add_trivas}` binding: one fact per line.
    pub fn render_facts(&self) -> String {
        self.semantic
            .iter()
            .map(|f| format!("- ({}) {}", format_datetime(&f.timestamp), f.display()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn soft_fail<T: Default>(r: Result<T, ReasonerError>, what: &str, warnings: &mut Vec<String>) -> Result<T, ReasonerError> {
    match r {
        Ok(v) => Ok(v),
        Err(e) if e.is_fatal() => Err(e),
        Err(e) => {
            let w = format!("{what}: {e}");
            warn!("{w}");
            warnings.push(w);
            Ok(T::default())
        }
    }
}

/// Coherence-driven retrieval with concurrent graph-query translation.
pub fn retrieve_coherence(
    bank: &EpisodicBank,
    store: &TripleStore,
    reasoner: &Reasoner,
    meter: &mut Meter,
    question: &str,
    k: usize,
    counter: &dyn TokenCounter,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut res = RetrievalResult::empty(RetrieverKind::Coherence, k);
    let want_episodic = !bank.is_empty();
    let want_semantic = !store.is_empty();

    let coherence_inputs = bindings([
        ("k", k.to_string()),
        ("question", question.to_string()),
        ("headlines", coherence_story_list(bank)),
    ]);
    let graph_inputs = bindings([("question", question)]);
    let (choices, patterns) = std::thread::scope(|s| {
        let c = want_episodic.then(|| s.spawn(|| reasoner.call_detached(PromptKind::CoherenceRetrieve, coherence_inputs)));
        let g = want_semantic.then(|| s.spawn(|| reasoner.call_detached(PromptKind::GraphQueryTranslate, graph_inputs)));
        (c.map(|h| h.join().expect("coherence call panicked")), g.map(|h| h.join().expect("graph call panicked")))
    });
    let costs: Vec<_> = choices.iter().chain(patterns.iter()).map(|c| c.cost).collect();
    meter.add_parallel(&costs);

    if let Some(c) = choices {
        reasoner.record(c.exchange);
        let parsed = c.output.and_then(|raw| parse_choices(&raw));
        let choices = soft_fail(parsed, "coherence choices", &mut res.warnings)?;
        if choices.len() > k {
            res.warnings.push(format!("{} choices returned; keeping the first {k}", choices.len()));
        }
        for ch in choices.into_iter().take(k) {
            match resolve_choice(bank, &ch.owner, &ch.topic) {
                Some(leaf) if !res.selections.iter().any(|s| s.leaf == leaf) => {
                    res.selections.push(Selection { leaf, score: None })
                }
                Some(_) => res.warnings.push(format!("duplicate choice ({}, {}) ignored", ch.owner, ch.topic)),
                None => {
                    let w = format!("choice ({}, {}) matches no headline; dropped", ch.owner, ch.topic);
                    warn!("{w}");
                    res.warnings.push(w);
                }
            }
        }
    }

    if let Some(g) = patterns {
        reasoner.record(g.exchange);
        let parsed = g.output.and_then(|raw| parse_patterns(&raw));
        let specs = soft_fail(parsed, "graph patterns", &mut res.warnings)?;
        let mut facts: Vec<TripleFact> = Vec::new();
        let mut any_valid = false;
        for p in specs {
            match TriplePattern::new(p.subject.as_deref(), p.predicate.as_deref(), p.object.as_deref()) {
                Ok(tp) => {
                    any_valid = true;
                    res.patterns.push(format!("{:?}", tp.fields()));
                    for f in store.query(&tp) {
                        if !facts.contains(&f) {
                            facts.push(f);
                        }
                    }
                }
                Err(e) => res.warnings.push(format!("pattern skipped: {e}")),
            }
        }
        if !any_valid {
            res.warnings.push("no usable graph pattern; falling back to entity neighbourhood".into());
            for f in neighbourhood_fallback(store, question) {
                if !facts.contains(&f) {
                    facts.push(f);
                }
            }
        }
        facts.sort_by(|a, b| a.timestamp.cmp(&b.timestamp));
        facts.truncate(k);
        res.semantic = facts;
    }

    res.assemble(bank, counter);
    Ok(res)
}

/// Neighbourhood of every stored entity whose name occurs in the question.
fn neighbourhood_fallback(store: &TripleStore, question: &str) -> Vec<TripleFact> {
    let q = format!(" {} ", crate::render::word_tokens(question).join(" "));
    let mut entities: Vec<String> = Vec::new();
    for f in store.facts() {
        for e in [&f.subject, &f.object] {
            let n = crate::render::word_tokens(&normalize(e)).join(" ");
            if !n.is_empty() && q.contains(&format!(" {n} ")) && !entities.contains(&n) {
                entities.push(n);
            }
        }
    }
    let mut out: Vec<TripleFact> = Vec::new();
    for e in entities {
        for f in store.entity_neighborhood(&e).unwrap_or_default() {
            if !out.contains(&f) {
                out.push(f);
            }
        }
    }
    out
}

/// Top-`k` leaves by cosine similarity to the question; ties keep bank
/// order.
pub fn retrieve_embedding(
    bank: &EpisodicBank,
    provider: &dyn EmbeddingProvider,
    question: &str,
    k: usize,
    counter: &dyn TokenCounter,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut res = RetrievalResult::empty(RetrieverKind::Embedding, k);
    let all = leaves(bank);
    if all.is_empty() {
        return Ok(res);
    }
    let mut texts: Vec<&str> = vec![question];
    texts.extend(all.iter().map(Leaf::title));
    let vecs = provider.embed(&texts)?;
    let qv = &vecs[0];
    let mut scored: Vec<(usize, f64)> = vecs[1..].iter().enumerate().map(|(i, v)| (i, cosine(qv, v))).collect();
    // stable: equal scores stay in bank order
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    res.selections = scored
        .into_iter()
        .take(k)
        .map(|(i, s)| Selection { leaf: all[i].clone(), score: Some(s) })
        .collect();
    res.assemble(bank, counter);
    Ok(res)
}

/// Cosine scores of `(question, a)` and `(question, b)`.
pub fn similarity_report(
    question: &str,
    a: &str,
    b: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<(f64, f64), RetrievalError> {
    let v = provider.embed(&[question, a, b])?;
    Ok((cosine(&v[0], &v[1]), cosine(&v[0], &v[2])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::{ClockMode, ScriptTable, ScriptedBackend};
    use crate::transcript::WhitespaceCounter;
    use chrono::NaiveDate;
    use std::sync::Arc;

    fn bank(headlines: &[(&str, &str)]) -> EpisodicBank {
        let ts = NaiveDate::from_ymd_opt(2023, 5, 8).unwrap().and_hms_opt(13, 0, 0).unwrap();
        let mut b = EpisodicBank::new();
        let stories: Vec<_> = headlines
            .iter()
            .enumerate()
            .map(|(i, (o, h))| crate::reasoner::InitStory {
                owner: o.to_string(),
                topic: h.to_string(),
                characters: vec![],
                content: vec![crate::reasoner::ContentItem { timestamp: None, speaker: None, text: format!("[s1t{}]", i + 1) }],
            })
            .collect();
        let turns: Vec<_> = (1..=headlines.len())
            .map(|i| crate::transcript::Turn {
                turn_id: format!("s1t{i}"),
                session_id: "s1".into(),
                speaker: headlines[i - 1].0.into(),
                timestamp: ts,
                ordinal: i as u32,
                text: format!("word{i} text here"),
            })
            .collect();
        b.apply_init(&stories, &turns).unwrap();
        b
    }

    fn with_script(f: impl FnOnce(&mut ScriptTable)) -> Reasoner {
        let mut t = ScriptTable::new();
        f(&mut t);
        Reasoner::new(Arc::new(ScriptedBackend::new(t)), ClockMode::simulated_default())
    }

    #[test]
    fn empty_bank_issues_no_call() {
        let r = with_script(|_| {});
        let mut m = Meter::start(r.clock());
        let res = retrieve_coherence(&EpisodicBank::new(), &TripleStore::new(), &r, &mut m, "q?", 2, &WhitespaceCounter).unwrap();
        assert!(res.selections.is_empty());
        assert_eq!(r.exchange_count(), 0);
    }

    #[test]
    fn over_length_choices_truncated_and_unknown_dropped() {
        let b = bank(&[("A", "One"), ("B", "Two"), ("A", "Three")]);
        let r = with_script(|t| {
            t.set_default(
                PromptKind::CoherenceRetrieve,
                "[{'owner': 'A', 'topic': 'Ghost'}, {'owner': 'A', 'topic': 'Three'}, {'owner': 'B', 'topic': 'Two'}]",
            )
        });
        let mut m = Meter::start(r.clock());
        let res = retrieve_coherence(&b, &TripleStore::new(), &r, &mut m, "q?", 2, &WhitespaceCounter).unwrap();
        assert_eq!(res.selections.len(), 1);
        assert_eq!(res.top_headline(), Some("Three"));
        assert_eq!(res.retrieved_turn_ids, BTreeSet::from(["s1t3".to_string()]));
        assert_eq!(res.retrieved_token_count, 3);

        let r = with_script(|t| {
            t.set_default(
                PromptKind::CoherenceRetrieve,
                "[{'owner': 'A', 'topic': 'One'}, {'owner': 'B', 'topic': 'Two'}, {'owner': 'A', 'topic': 'Three'}]",
            )
        });
        let res = retrieve_coherence(&b, &TripleStore::new(), &r, &mut m, "q?", 2, &WhitespaceCounter).unwrap();
        assert_eq!(res.selections.len(), 2);
    }

    #[test]
    fn embedding_single_narrative_always_chosen() {
        let b = bank(&[("A", "Zebra")]);
        let res = retrieve_embedding(&b, &HashedBow::default(), "unrelated words", 2, &WhitespaceCounter).unwrap();
        assert_eq!(res.selections.len(), 1);
    }

    #[test]
    fn embedding_ties_follow_bank_order() {
        let b = bank(&[("A", "xx"), ("B", "yy"), ("C", "zz")]);
        let res = retrieve_embedding(&b, &HashedBow::default(), "nothing shared", 2, &WhitespaceCounter).unwrap();
        let titles: Vec<_> = res.selections.iter().map(|s| s.leaf.title().to_string()).collect();
        assert_eq!(titles, ["xx", "yy"]);
    }

    #[test]
    fn rendered_answer_sections() {
        let b = bank(&[("A", "One"), ("B", "Two")]);
        let mut res = RetrievalResult::empty(RetrieverKind::Coherence, 2);
        for l in leaves(&b) {
            res.selections.push(Selection { leaf: l, score: None });
        }
        res.assemble(&b, &WhitespaceCounter);
        let text = res.render_stories();
        assert!(text.contains("Story: One (owner: A)") && text.contains("Story: Two (owner: B)"));
        assert!(text.contains("(1:00 pm on 8 May, 2023) A: word1 text here"));
    }
}
