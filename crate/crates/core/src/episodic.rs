//! Episodic memory bank: narratives as plot -> subplot trees over an ordered
//! list of timestamped fragments.

use std::collections::BTreeSet;
use std::ops::Range;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::reasoner::{BindingAction, BindingDecision, ConsolidationVerdict, ContentItem, InitStory};
use crate::render::{normalize_ws, parse_excerpt, word_tokens, ExcerptParts};
use crate::transcript::Turn;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EpisodicError {
    #[error("memory initialisation requires an empty bank")]
    NonEmptyBank,
    #[error("malformed init payload: {0}")]
    MalformedInitPayload(String),
    #[error("malformed consolidation verdict: {0}")]
    MalformedVerdict(String),
    #[error("unknown narrative {0}")]
    UnknownNarrative(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFragment {
    pub fragment_id: String,
    pub timestamp: NaiveDateTime,
    pub speaker: String,
    pub content: String,
    pub source_turn_ids: BTreeSet<String>,
    pub bound_at_iteration: u64,
}

impl MemoryFragment {
    pub fn new(
        timestamp: NaiveDateTime,
        speaker: impl Into<String>,
        content: impl Into<String>,
        source_turn_ids: BTreeSet<String>,
        bound_at_iteration: u64,
    ) -> Self {
        let content = content.into();
        Self {
            fragment_id: fragment_id(&content, &timestamp),
            timestamp,
            speaker: speaker.into(),
            content,
            source_turn_ids,
            bound_at_iteration,
        }
    }
}

/// First 16 hex digits of SHA-256 over `content|timestamp`.
pub fn fragment_id(content: &str, timestamp: &NaiveDateTime) -> String {
    let mut h = Sha256::new();
    h.update(content.as_bytes());
    h.update(b"|");
    h.update(timestamp.format("%Y-%m-%dT%H:%M:%S").to_string().as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

/// A subplot over fragments `start..end` (half-open) of its narrative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubplotNode {
    pub sub_headline: String,
    pub start: usize,
    pub end: usize,
    pub created_at_iteration: u64,
}

impl SubplotNode {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Active,
    Inactive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub narrative_id: String,
    pub owner: String,
    pub characters: Vec<String>,
    pub headline: String,
    pub fragments: Vec<MemoryFragment>,
    pub subplots: Vec<SubplotNode>,
    pub activity: Activity,
    pub last_bound_iteration: u64,
    pub consolidated_through: usize,
}

impl Narrative {
    /// The fragments a consolidation pass looks at: the most recent `n`,
    /// never reaching back before `consolidated_through`.
    pub fn consolidation_window(&self, n: usize) -> Range<usize> {
        let len = self.fragments.len();
        len.saturating_sub(n).max(self.consolidated_through).min(len)..len
    }

    pub fn source_turn_ids(&self, range: Range<usize>) -> BTreeSet<String> {
        self.fragments[range].iter().flat_map(|f| f.source_turn_ids.iter().cloned()).collect()
    }

    fn insert_fragment(&mut self, f: MemoryFragment) -> usize {
        let pos = self.fragments.partition_point(|g| g.timestamp <= f.timestamp);
        if pos < self.fragments.len() {
            // keep subplot blocks contiguous when an older fragment arrives late
            for s in &mut self.subplots {
                if s.start >= pos {
                    s.start += 1;
                    s.end += 1;
                } else if s.end > pos {
                    s.end += 1;
                }
            }
            if self.consolidated_through > pos {
                self.consolidated_through += 1;
            }
        }
        self.fragments.insert(pos, f);
        pos
    }

    fn validate(&self) -> Result<(), String> {
        if self.headline.trim().is_empty() {
            return Err(format!("{}: empty headline", self.narrative_id));
        }
        if self.consolidated_through > self.fragments.len() {
            return Err(format!("{}: consolidated_through out of bounds", self.narrative_id));
        }
        let mut prev_end = 0;
        for s in &self.subplots {
            if s.start >= s.end || s.end > self.fragments.len() || s.start < prev_end {
                return Err(format!("{}: bad subplot range {}..{}", self.narrative_id, s.start, s.end));
            }
            prev_end = s.end;
        }
        for w in self.fragments.windows(2) {
            if w[0].timestamp > w[1].timestamp {
                return Err(format!("{}: fragments out of order", self.narrative_id));
            }
        }
        for f in &self.fragments {
            if f.content.trim().is_empty() || f.source_turn_ids.is_empty() {
                return Err(format!("{}: fragment {} lacks content or provenance", self.narrative_id, f.fragment_id));
            }
        }
        Ok(())
    }
}

/// Exact `(owner, headline)` match after whitespace normalisation.
fn key_eq(a_owner: &str, a_head: &str, b_owner: &str, b_head: &str) -> bool {
    normalize_ws(a_owner) == normalize_ws(b_owner) && normalize_ws(a_head) == normalize_ws(b_head)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadlineEntry {
    pub narrative_id: String,
    pub owner: String,
    pub headline: String,
    pub sub_headlines: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingOutcome {
    pub bound: usize,
    pub created: Vec<String>,
    /// Narratives that received at least one fragment.
    pub touched: Vec<String>,
    /// Narratives that were Inactive and received a fragment.
    pub reactivated: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidationOutcome {
    pub subplots_created: usize,
    pub renamed_to: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodicBank {
    pub narratives: Vec<Narrative>,
    pub iteration_counter: u64,
    #[serde(default)]
    next_id: u64,
}

impl EpisodicBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.narratives.is_empty()
    }

    pub fn fragment_total(&self) -> usize {
        self.narratives.iter().map(|n| n.fragments.len()).sum()
    }

    pub fn get(&self, id: &str) -> Option<&Narrative> {
        self.narratives.iter().find(|n| n.narrative_id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Narrative> {
        self.narratives.iter_mut().find(|n| n.narrative_id == id)
    }

    pub fn find(&self, owner: &str, headline: &str) -> Option<&Narrative> {
        self.narratives.iter().find(|n| key_eq(&n.owner, &n.headline, owner, headline))
    }

    fn find_index(&self, owner: &str, headline: &str) -> Option<usize> {
        self.narratives.iter().position(|n| key_eq(&n.owner, &n.headline, owner, headline))
    }

    fn create(&mut self, owner: &str, headline: &str, characters: Vec<String>) -> usize {
        self.next_id += 1;
        let owner = normalize_ws(owner);
        let mut characters = characters;
        if !characters.contains(&owner) {
            characters.insert(0, owner.clone());
        }
        self.narratives.push(Narrative {
            narrative_id: format!("n{:03}", self.next_id),
            owner,
            characters,
            headline: normalize_ws(headline),
            fragments: Vec::new(),
            subplots: Vec::new(),
            activity: Activity::Active,
            last_bound_iteration: self.iteration_counter,
            consolidated_through: 0,
        });
        self.narratives.len() - 1
    }

    /// Builds the bank from the story-initialisation verdict. Content items
    /// are traced back to `turns` for provenance. Stories sharing an
    /// `(owner, topic)` key are merged.
    pub fn apply_init(&mut self, stories: &[InitStory], turns: &[Turn]) -> Result<BindingOutcome, EpisodicError> {
        if !self.is_empty() {
            return Err(EpisodicError::NonEmptyBank);
        }
        let mut out = BindingOutcome::default();
        for s in stories {
            if s.owner.trim().is_empty() || s.topic.trim().is_empty() {
                return Err(EpisodicError::MalformedInitPayload("story without owner or topic".into()));
            }
            if s.content.is_empty() {
                return Err(EpisodicError::MalformedInitPayload(format!("story `{}` has no content", s.topic)));
            }
            let idx = match self.find_index(&s.owner, &s.topic) {
                Some(i) => i,
                None => {
                    let i = self.create(&s.owner, &s.topic, s.characters.clone());
                    out.created.push(self.narratives[i].narrative_id.clone());
                    i
                }
            };
            for item in &s.content {
                let Some(frag) = fragment_from_item(item, turns, self.iteration_counter) else {
                    let w = format!("init content not traceable to a turn: {}", item.text);
                    warn!("{w}");
                    out.warnings.push(w);
                    continue;
                };
                let n = &mut self.narratives[idx];
                if n.fragments.iter().any(|f| f.fragment_id == frag.fragment_id) {
                    continue;
                }
                n.insert_fragment(frag);
                out.bound += 1;
            }
        }
        // a story whose every item failed to resolve leaves an empty narrative
        let before = self.narratives.len();
        self.narratives.retain(|n| !n.fragments.is_empty());
        if self.narratives.len() != before {
            out.created.retain(|id| self.narratives.iter().any(|n| &n.narrative_id == id));
            out.warnings.push(format!("{} narrative(s) dropped for lack of traceable content", before - self.narratives.len()));
        }
        out.touched = self.narratives.iter().map(|n| n.narrative_id.clone()).collect();
        Ok(out)
    }

    /// Routes each decision's fragment. An extend onto an unknown key
    /// degrades to a create with a warning; a create onto an existing key
    /// merges into it.
    pub fn apply_binding(&mut self, decisions: &[BindingDecision], new_turns: &[Turn]) -> BindingOutcome {
        let mut out = BindingOutcome::default();
        for d in decisions {
            let parts = parse_excerpt(&d.message_excerpt);
            let Some(frag) = fragment_from_parts(&parts, new_turns, self.iteration_counter) else {
                let w = format!("binding excerpt not traceable: {}", d.message_excerpt);
                warn!("{w}");
                out.warnings.push(w);
                continue;
            };
            let idx = match (self.find_index(&d.owner, &d.topic), d.action) {
                (Some(i), BindingAction::ExtendStory) => i,
                (Some(i), BindingAction::CreateNewStory) => {
                    if self.narratives[i].fragments.iter().any(|f| f.fragment_id == frag.fragment_id) {
                        continue;
                    }
                    i
                }
                (None, action) => {
                    if action == BindingAction::ExtendStory {
                        let w = format!("extend_story onto unknown ({}, {}); creating it", d.owner, d.topic);
                        warn!("{w}");
                        out.warnings.push(w);
                    }
                    if d.owner.trim().is_empty() || d.topic.trim().is_empty() {
                        out.warnings.push("binding decision without owner or topic skipped".into());
                        continue;
                    }
                    let i = self.create(&d.owner, &d.topic, Vec::new());
                    out.created.push(self.narratives[i].narrative_id.clone());
                    i
                }
            };
            let iter = self.iteration_counter;
            let n = &mut self.narratives[idx];
            if n.activity == Activity::Inactive && !out.reactivated.contains(&n.narrative_id) {
                out.reactivated.push(n.narrative_id.clone());
            }
            n.activity = Activity::Active;
            n.last_bound_iteration = iter;
            n.insert_fragment(frag);
            out.bound += 1;
            if !out.touched.contains(&n.narrative_id) {
                out.touched.push(n.narrative_id.clone());
            }
        }
        out
    }

    /// Applies a consolidation verdict whose intervals are relative to
    /// `window` (the fragments presented to the reasoner).
    pub fn apply_consolidation(
        &mut self,
        narrative_id: &str,
        window: Range<usize>,
        verdict: &ConsolidationVerdict,
    ) -> Result<ConsolidationOutcome, EpisodicError> {
        let idx = self
            .narratives
            .iter()
            .position(|n| n.narrative_id == narrative_id)
            .ok_or_else(|| EpisodicError::UnknownNarrative(narrative_id.to_string()))?;
        if window.end > self.narratives[idx].fragments.len() || window.start > window.end {
            return Err(EpisodicError::MalformedVerdict(format!("window {window:?} out of bounds")));
        }
        for s in &verdict.substories {
            if s.start > s.end {
                return Err(EpisodicError::MalformedVerdict(format!("interval ({}, {}) is reversed", s.start, s.end)));
            }
        }
        let mut out = ConsolidationOutcome::default();
        let iteration = self.iteration_counter;

        let rename = verdict.new_topic.as_deref().map(normalize_ws).filter(|t| !t.is_empty());
        if let Some(topic) = &rename {
            let owner = self.narratives[idx].owner.clone();
            let clash = self
                .narratives
                .iter()
                .enumerate()
                .any(|(i, n)| i != idx && key_eq(&n.owner, &n.headline, &owner, topic));
            if clash {
                out.warnings.push(format!("rename to `{topic}` would duplicate an existing headline; kept"));
            } else if *topic != self.narratives[idx].headline {
                out.renamed_to = Some(topic.clone());
            }
        }

        let n = &mut self.narratives[idx];
        let mut subs = verdict.substories.clone();
        subs.sort_by_key(|s| (s.start, s.end));
        // absolute, half-open; never reaching into already consolidated fragments
        let floor = window.start.max(n.consolidated_through);
        let mut cursor = floor;
        for s in subs {
            let lo = window.start + s.start;
            let hi = (window.start + s.end + 1).min(window.end);
            let lo_clipped = lo.max(cursor);
            if lo_clipped >= hi {
                let w = format!("substory `{}` ({}, {}) dropped: outside window or overlapping", s.sub_topic, s.start, s.end);
                warn!("{w}");
                out.warnings.push(w);
                continue;
            }
            if lo_clipped != lo || hi != window.start + s.end + 1 {
                out.warnings.push(format!("substory `{}` clipped to {}..{}", s.sub_topic, lo_clipped, hi));
            }
            let headline = normalize_ws(&s.sub_topic);
            if headline.is_empty() {
                out.warnings.push("substory without topic dropped".into());
                continue;
            }
            n.subplots.push(SubplotNode { sub_headline: headline, start: lo_clipped, end: hi, created_at_iteration: iteration });
            out.subplots_created += 1;
            cursor = hi;
        }
        if out.subplots_created > 0 {
            n.consolidated_through = cursor;
        }
        if let Some(t) = &out.renamed_to {
            n.headline = t.clone();
        }
        for w in &out.warnings {
            warn!(narrative = %n.narrative_id, "{w}");
        }
        Ok(out)
    }

    pub fn list_headlines(&self) -> Vec<HeadlineEntry> {
        self.narratives
            .iter()
            .map(|n| HeadlineEntry {
                narrative_id: n.narrative_id.clone(),
                owner: n.owner.clone(),
                headline: n.headline.clone(),
                sub_headlines: n.subplots.iter().map(|s| s.sub_headline.clone()).collect(),
            })
            .collect()
    }

    /// Checks every structural invariant; used after mutations in tests and
    /// on restore.
    pub fn validate(&self) -> Result<(), String> {
        let mut ids = BTreeSet::new();
        for (i, n) in self.narratives.iter().enumerate() {
            if !ids.insert(&n.narrative_id) {
                return Err(format!("duplicate narrative id {}", n.narrative_id));
            }
            n.validate()?;
            if self.narratives[..i].iter().any(|m| key_eq(&m.owner, &m.headline, &n.owner, &n.headline)) {
                return Err(format!("duplicate (owner, headline) ({}, {})", n.owner, n.headline));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, at: Option<NaiveDateTime>) -> BankSnapshot {
        BankSnapshot { version: SNAPSHOT_VERSION, iteration: self.iteration_counter, at, bank: self.clone() }
    }
}

/// Versioned, timestamped bank snapshot. `at` is the conversation time of
/// the iteration that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub version: u32,
    pub iteration: u64,
    pub at: Option<NaiveDateTime>,
    pub bank: EpisodicBank,
}

impl BankSnapshot {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("snapshot serializes");
        s.push('\n');
        s
    }

    pub fn from_json(raw: &str) -> Result<Self, EpisodicError> {
        let snap: BankSnapshot =
            serde_json::from_str(raw).map_err(|e| EpisodicError::CorruptSnapshot(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(EpisodicError::CorruptSnapshot(format!("unsupported version {}", snap.version)));
        }
        snap.bank.validate().map_err(EpisodicError::CorruptSnapshot)?;
        Ok(snap)
    }

    pub fn restore(raw: &str) -> Result<EpisodicBank, EpisodicError> {
        Self::from_json(raw).map(|s| s.bank)
    }
}

/// Traces an excerpt to one of `candidates`: explicit tags first, then text
/// containment, then the largest word overlap.
pub fn resolve_excerpt<'a>(parts: &ExcerptParts, candidates: &'a [Turn]) -> Vec<&'a Turn> {
    let tagged: Vec<&Turn> = candidates.iter().filter(|t| parts.turn_ids.contains(&t.turn_id)).collect();
    if !tagged.is_empty() {
        return tagged;
    }
    let needle = normalize_ws(&parts.utterance).to_lowercase();
    if needle.is_empty() {
        return Vec::new();
    }
    if let Some(t) = candidates.iter().find(|t| {
        let hay = normalize_ws(&t.text).to_lowercase();
        hay.contains(&needle) || (needle.len() >= 12 && needle.contains(&hay))
    }) {
        return vec![t];
    }
    let words: BTreeSet<String> = word_tokens(&needle).into_iter().collect();
    let mut best: Option<(&Turn, usize)> = None;
    for t in candidates {
        let w: BTreeSet<String> = word_tokens(&t.text).into_iter().collect();
        let overlap = words.intersection(&w).count();
        if overlap > 0 && best.is_none_or(|(_, b)| overlap > b) {
            best = Some((t, overlap));
        }
    }
    best.map(|(t, _)| vec![t]).unwrap_or_default()
}

fn fragment_from_parts(parts: &ExcerptParts, turns: &[Turn], iteration: u64) -> Option<MemoryFragment> {
    let sources = resolve_excerpt(parts, turns);
    let first = *sources.first()?;
    let content = if parts.utterance.is_empty() { normalize_ws(&first.text) } else { parts.utterance.clone() };
    let speaker = parts.speaker.clone().unwrap_or_else(|| first.speaker.clone());
    let ids = sources.iter().map(|t| t.turn_id.clone()).collect();
    let ts = sources.iter().map(|t| t.timestamp).max().expect("non-empty");
    Some(MemoryFragment::new(ts, speaker, content, ids, iteration))
}

fn fragment_from_item(item: &ContentItem, turns: &[Turn], iteration: u64) -> Option<MemoryFragment> {
    let parts = ExcerptParts::from_fields(item.timestamp.clone(), item.speaker.clone(), item.text.clone());
    fragment_from_parts(&parts, turns, iteration)
}
