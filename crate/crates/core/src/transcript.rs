//! Conversation transcripts: ingestion (LOCOMO and native JSON), replay and
//! token counting.
//!
//! Turn identifiers follow the `s{session}t{turn}` scheme (both 1-based, by
//! position in the source file) so evidence annotations and coverage numbers
//! stay comparable across runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("transcript has no turns")]
    EmptyTranscript,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: String,
    pub session_id: String,
    pub speaker: String,
    /// Session-level timestamp; `ordinal` breaks ties inside a session.
    pub timestamp: NaiveDateTime,
    pub ordinal: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub datetime: NaiveDateTime,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    SingleHop,
    MultiHop,
    Temporal,
    Commonsense,
    Other,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 5] = [
        QuestionCategory::MultiHop,
        QuestionCategory::Temporal,
        QuestionCategory::Commonsense,
        QuestionCategory::SingleHop,
        QuestionCategory::Other,
    ];

    /// Numeric LOCOMO categories, using the labelling of the Mem0 evaluation
    /// scripts (1 multi-hop, 2 temporal, 3 open-domain, 4 single-hop).
    pub fn from_locomo(id: i64) -> Self {
        match id {
            1 => QuestionCategory::MultiHop,
            2 => QuestionCategory::Temporal,
            3 => QuestionCategory::Commonsense,
            4 => QuestionCategory::SingleHop,
            _ => QuestionCategory::Other,
        }
    }

    /// Lenient name lookup; unknown names map to `Other`.
    pub fn from_name(name: &str) -> Self {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "singlehop" => QuestionCategory::SingleHop,
            "multihop" => QuestionCategory::MultiHop,
            "temporal" => QuestionCategory::Temporal,
            "commonsense" | "opendomain" => QuestionCategory::Commonsense,
            _ => QuestionCategory::Other,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            QuestionCategory::SingleHop => "single_hop",
            QuestionCategory::MultiHop => "multi_hop",
            QuestionCategory::Temporal => "temporal",
            QuestionCategory::Commonsense => "commonsense",
            QuestionCategory::Other => "other",
        }
    }
}

impl fmt::Display for QuestionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuestion {
    pub question_id: String,
    pub text: String,
    pub category: QuestionCategory,
    pub gold_answer: String,
    #[serde(default)]
    pub evidence_turn_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub scenario_id: String,
    pub sessions: Vec<Session>,
    #[serde(default)]
    pub questions: Vec<EvalQuestion>,
}

impl Transcript {
    pub fn turn_count(&self) -> usize {
        self.sessions.iter().map(|s| s.turns.len()).sum()
    }

    /// Turns in (session, turn) order. Each call is an independent cursor.
    pub fn replay(&self) -> impl Iterator<Item = &Turn> + '_ {
        self.sessions.iter().flat_map(|s| s.turns.iter())
    }

    pub fn turn(&self, turn_id: &str) -> Option<&Turn> {
        self.replay().find(|t| t.turn_id == turn_id)
    }

    pub fn turn_ids(&self) -> BTreeSet<String> {
        self.replay().map(|t| t.turn_id.clone()).collect()
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for t in self.replay() {
            if !seen.contains(&t.speaker) {
                seen.push(t.speaker.clone());
            }
        }
        seen
    }

    /// Serialize to the native JSON format. Stable: re-ingesting the output
    /// yields a byte-identical serialization.
    pub fn to_native_json(&self) -> String {
        let native = NativeTranscript {
            scenario_id: Some(self.scenario_id.clone()),
            sessions: self
                .sessions
                .iter()
                .map(|s| NativeSession {
                    session_id: Some(s.session_id.clone()),
                    datetime: format_datetime(&s.datetime),
                    turns: s
                        .turns
                        .iter()
                        .map(|t| NativeTurn {
                            speaker: t.speaker.clone(),
                            text: t.text.clone(),
                        })
                        .collect(),
                })
                .collect(),
            questions: self
                .questions
                .iter()
                .map(|q| NativeQuestion {
                    question_id: Some(q.question_id.clone()),
                    text: q.text.clone(),
                    category: Some(q.category.label().to_string()),
                    gold_answer: Value::String(q.gold_answer.clone()),
                    evidence_turn_ids: q.evidence_turn_ids.iter().cloned().collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&native).expect("native transcript serializes")
    }

    fn validate(self) -> Result<Self, TranscriptError> {
        if self.turn_count() == 0 {
            return Err(TranscriptError::EmptyTranscript);
        }
        let mut ids = BTreeSet::new();
        for t in self.replay() {
            if !ids.insert(t.turn_id.as_str()) {
                return Err(TranscriptError::MalformedInput(format!(
                    "duplicate turn id {}",
                    t.turn_id
                )));
            }
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Date handling
// ---------------------------------------------------------------------------

const LOCOMO_DATE_FORMAT: &str = "%I:%M %p on %d %B, %Y";

/// Parses LOCOMO-style ("1:56 pm on 8 May, 2023") and ISO-ish date strings.
pub fn parse_datetime(raw: &str) -> Option<NaiveDateTime> {
    let s = raw.trim();
    let formats = [
        LOCOMO_DATE_FORMAT,
        "%I:%M %p on %d %b, %Y",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ];
    for f in formats {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(dt);
        }
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local());
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    None
}

/// Canonical display form, LOCOMO style.
pub fn format_datetime(dt: &NaiveDateTime) -> String {
    dt.format("%-I:%M %P on %-d %B, %Y").to_string()
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Reads a LOCOMO file. Accepts a single sample object, an array of samples
/// (the first one is returned), or a bare `{"sessions": [...]}` object.
pub fn ingest_locomo(path: impl AsRef<Path>) -> Result<Transcript, TranscriptError> {
    let raw = std::fs::read_to_string(path)?;
    parse_locomo_str(&raw)
}

/// Every sample of a LOCOMO file, in file order.
pub fn ingest_locomo_all(path: impl AsRef<Path>) -> Result<Vec<Transcript>, TranscriptError> {
    let raw = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&raw)
        .map_err(|e| TranscriptError::MalformedInput(e.to_string()))?;
    match value {
        Value::Array(items) => items.iter().map(parse_locomo_value).collect(),
        other => Ok(vec![parse_locomo_value(&other)?]),
    }
}

pub fn parse_locomo_str(raw: &str) -> Result<Transcript, TranscriptError> {
    let value: Value = serde_json::from_str(raw)
        .map_err(|e| TranscriptError::MalformedInput(e.to_string()))?;
    match &value {
        Value::Array(items) => {
            let first = items
                .first()
                .ok_or_else(|| TranscriptError::MalformedInput("empty sample list".into()))?;
            parse_locomo_value(first)
        }
        other => parse_locomo_value(other),
    }
}

fn parse_locomo_value(value: &Value) -> Result<Transcript, TranscriptError> {
    let obj = value
        .as_object()
        .ok_or_else(|| TranscriptError::MalformedInput("expected a JSON object".into()))?;
    if !obj.contains_key("conversation") {
        if obj.contains_key("sessions") {
            return parse_native_value(value.clone());
        }
        return Err(TranscriptError::MalformedInput(
            "missing `conversation` or `sessions`".into(),
        ));
    }
    let conv = obj["conversation"]
        .as_object()
        .ok_or_else(|| TranscriptError::MalformedInput("`conversation` is not an object".into()))?;
    let scenario_id = obj
        .get("sample_id")
        .and_then(Value::as_str)
        .unwrap_or("locomo")
        .to_string();

    let session_key = regex::Regex::new(r"^session_(\d+)$").expect("static regex");
    let mut raw_sessions: Vec<(u32, NaiveDateTime, &Vec<Value>)> = Vec::new();
    for (key, val) in conv {
        let Some(caps) = session_key.captures(key) else { continue };
        let number: u32 = caps[1].parse().unwrap_or(0);
        let Some(turns) = val.as_array() else { continue };
        let date_key = format!("{key}_date_time");
        let date_raw = conv.get(&date_key).and_then(Value::as_str).ok_or_else(|| {
            TranscriptError::MalformedInput(format!("missing `{date_key}`"))
        })?;
        let dt = parse_datetime(date_raw).ok_or_else(|| {
            TranscriptError::MalformedInput(format!("unparsable date `{date_raw}`"))
        })?;
        raw_sessions.push((number, dt, turns));
    }
    if raw_sessions.is_empty() {
        return Err(TranscriptError::MalformedInput("no sessions found".into()));
    }
    raw_sessions.sort_by_key(|(n, dt, _)| (*dt, *n));

    let mut dia_map: HashMap<String, String> = HashMap::new();
    let mut sessions = Vec::new();
    for (si, (_, dt, turns)) in raw_sessions.iter().enumerate() {
        let session_id = format!("s{}", si + 1);
        let mut out = Vec::new();
        for (ti, t) in turns.iter().enumerate() {
            let turn_id = format!("s{}t{}", si + 1, ti + 1);
            let speaker = t.get("speaker").and_then(Value::as_str).unwrap_or("").trim();
            let mut text = t.get("text").and_then(Value::as_str).unwrap_or("").trim().to_string();
            if let Some(caption) = t.get("blip_caption").and_then(Value::as_str) {
                if !caption.trim().is_empty() {
                    text = format!("{text} [shares a photo: {}]", caption.trim());
                }
            }
            if let Some(dia) = t.get("dia_id").and_then(Value::as_str) {
                dia_map.insert(dia.trim().to_string(), turn_id.clone());
            }
            if text.trim().is_empty() || speaker.is_empty() {
                warn!(turn_id, "skipping turn with empty text or speaker");
                continue;
            }
            out.push(Turn {
                turn_id,
                session_id: session_id.clone(),
                speaker: speaker.to_string(),
                timestamp: *dt,
                ordinal: (ti + 1) as u32,
                text: text.trim().to_string(),
            });
        }
        sessions.push(Session { session_id, datetime: *dt, turns: out });
    }

    let known: BTreeSet<String> = sessions
        .iter()
        .flat_map(|s| s.turns.iter().map(|t| t.turn_id.clone()))
        .collect();
    let splitter = regex::Regex::new(r"[;,\s]+").expect("static regex");
    let mut questions = Vec::new();
    if let Some(qa) = obj.get("qa").and_then(Value::as_array) {
        for (qi, q) in qa.iter().enumerate() {
            let text = q.get("question").and_then(Value::as_str).unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let gold = q
                .get("answer")
                .or_else(|| q.get("adversarial_answer"))
                .map(value_to_text)
                .unwrap_or_default();
            let category = q
                .get("category")
                .and_then(Value::as_i64)
                .map(QuestionCategory::from_locomo)
                .unwrap_or(QuestionCategory::Other);
            let mut evidence = BTreeSet::new();
            for ev in q.get("evidence").and_then(Value::as_array).into_iter().flatten() {
                let Some(ev) = ev.as_str() else { continue };
                for piece in splitter.split(ev).filter(|p| !p.is_empty()) {
                    let id = dia_map.get(piece).cloned().or_else(|| dia_to_turn_id(piece));
                    match id {
                        Some(id) if known.contains(&id) => {
                            evidence.insert(id);
                        }
                        _ => warn!(evidence = piece, "dropping unresolvable evidence reference"),
                    }
                }
            }
            questions.push(EvalQuestion {
                question_id: format!("q{}", qi + 1),
                text: text.to_string(),
                category,
                gold_answer: gold,
                evidence_turn_ids: evidence,
            });
        }
    }
    Transcript { scenario_id, sessions, questions }.validate()
}

fn dia_to_turn_id(dia: &str) -> Option<String> {
    let re = regex::Regex::new(r"^D(\d+):(\d+)$").expect("static regex");
    let caps = re.captures(dia.trim())?;
    Some(format!("s{}t{}", &caps[1], &caps[2]))
}

fn value_to_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeTranscript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scenario_id: Option<String>,
    sessions: Vec<NativeSession>,
    #[serde(default)]
    questions: Vec<NativeQuestion>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeSession {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    session_id: Option<String>,
    datetime: String,
    turns: Vec<NativeTurn>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeTurn {
    speaker: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeQuestion {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question_id: Option<String>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
    #[serde(default)]
    gold_answer: Value,
    #[serde(default)]
    evidence_turn_ids: Vec<String>,
}

/// Reads the native transcript format (see README for the schema).
pub fn ingest_native(path: impl AsRef<Path>) -> Result<Transcript, TranscriptError> {
    let raw = std::fs::read_to_string(path)?;
    parse_native_str(&raw)
}

pub fn parse_native_str(raw: &str) -> Result<Transcript, TranscriptError> {
    let value: Value = serde_json::from_str(raw)
        .map_err(|e| TranscriptError::MalformedInput(e.to_string()))?;
    parse_native_value(value)
}

fn parse_native_value(value: Value) -> Result<Transcript, TranscriptError> {
    let native: NativeTranscript = serde_json::from_value(value)
        .map_err(|e| TranscriptError::MalformedInput(e.to_string()))?;
    let mut sessions = Vec::new();
    for (si, s) in native.sessions.iter().enumerate() {
        let dt = parse_datetime(&s.datetime).ok_or_else(|| {
            TranscriptError::MalformedInput(format!("unparsable date `{}`", s.datetime))
        })?;
        let session_id = s.session_id.clone().unwrap_or_else(|| format!("s{}", si + 1));
        let mut turns = Vec::new();
        for (ti, t) in s.turns.iter().enumerate() {
            let turn_id = format!("s{}t{}", si + 1, ti + 1);
            if t.text.trim().is_empty() || t.speaker.trim().is_empty() {
                warn!(turn_id, "skipping turn with empty text or speaker");
                continue;
            }
            turns.push(Turn {
                turn_id,
                session_id: session_id.clone(),
                speaker: t.speaker.trim().to_string(),
                timestamp: dt,
                ordinal: (ti + 1) as u32,
                text: t.text.trim().to_string(),
            });
        }
        sessions.push(Session { session_id, datetime: dt, turns });
    }
    for pair in sessions.windows(2) {
        if pair[1].datetime < pair[0].datetime {
            return Err(TranscriptError::MalformedInput(format!(
                "session {} is dated before session {}",
                pair[1].session_id, pair[0].session_id
            )));
        }
    }
    let known: BTreeSet<String> = sessions
        .iter()
        .flat_map(|s| s.turns.iter().map(|t| t.turn_id.clone()))
        .collect();
    let mut questions = Vec::new();
    for (qi, q) in native.questions.into_iter().enumerate() {
        let question_id = q.question_id.unwrap_or_else(|| format!("q{}", qi + 1));
        let mut evidence = BTreeSet::new();
        for id in q.evidence_turn_ids {
            if known.contains(&id) {
                evidence.insert(id);
            } else {
                return Err(TranscriptError::MalformedInput(format!(
                    "question {question_id} cites unknown turn {id}"
                )));
            }
        }
        questions.push(EvalQuestion {
            question_id,
            text: q.text.trim().to_string(),
            category: q
                .category
                .as_deref()
                .map(QuestionCategory::from_name)
                .unwrap_or(QuestionCategory::Other),
            gold_answer: value_to_text(&q.gold_answer),
            evidence_turn_ids: evidence,
        });
    }
    Transcript {
        scenario_id: native.scenario_id.unwrap_or_else(|| "scenario".to_string()),
        sessions,
        questions,
    }
    .validate()
}

/// Auto-detects the format: LOCOMO if a `conversation` object is present
/// (or the file is an array of samples), native otherwise.
pub fn ingest(path: impl AsRef<Path>) -> Result<Transcript, TranscriptError> {
    let raw = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&raw)
        .map_err(|e| TranscriptError::MalformedInput(e.to_string()))?;
    let is_locomo = match &value {
        Value::Array(_) => true,
        Value::Object(o) => o.contains_key("conversation"),
        _ => false,
    };
    if is_locomo {
        parse_locomo_str(&raw)
    } else {
        parse_native_value(value)
    }
}

// ---------------------------------------------------------------------------
// Token counting
// ---------------------------------------------------------------------------

/// Counts tokens in a text.
///
/// Built-in counters are additive over concatenation with a single space
/// separator: `count(a + " " + b) == count(a) + count(b)`.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
    fn name(&self) -> &str;
}

/// Whitespace-delimited tokens. The default counter.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
    fn name(&self) -> &str {
        "whitespace"
    }
}

/// Non-whitespace characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharCounter;

impl TokenCounter for CharCounter {
    fn count(&self, text: &str) -> usize {
        text.chars().filter(|c| !c.is_whitespace()).count()
    }
    fn name(&self) -> &str {
        "character"
    }
}

/// Adapter for an external tokenizer.
pub struct FnCounter<F> {
    name: String,
    f: F,
}

impl<F: Fn(&str) -> usize + Send + Sync> FnCounter<F> {
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F: Fn(&str) -> usize + Send + Sync> TokenCounter for FnCounter<F> {
    fn count(&self, text: &str) -> usize {
        (self.f)(text)
    }
    fn name(&self) -> &str {
        &self.name
    }
}

pub fn count_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

/// Sum of per-turn token counts.
pub fn transcript_tokens(t: &Transcript, counter: &dyn TokenCounter) -> usize {
    t.replay().map(|turn| counter.count(&turn.text)).sum()
}

/// Per-session turn counts, handy for summaries.
pub fn session_sizes(t: &Transcript) -> BTreeMap<String, usize> {
    t.sessions.iter().map(|s| (s.session_id.clone(), s.turns.len())).collect()
}
