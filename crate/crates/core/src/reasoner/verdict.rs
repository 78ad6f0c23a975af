//! Typed reasoner verdicts and their recovery from raw completions.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::literal::candidate_literals;
use super::{PromptKind, ReasonerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingAction {
    ExtendStory,
    CreateNewStory,
}

impl BindingAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            BindingAction::ExtendStory => "extend_story",
            BindingAction::CreateNewStory => "create_new_story",
        }
    }
}

/// One routing decision from the binding prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingDecision {
    pub message_excerpt: String,
    pub action: BindingAction,
    pub owner: String,
    pub topic: String,
}

/// A message copy inside an initialised story. Plain strings keep only
/// `text`; tuple or dict forms fill the other fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentItem {
    pub timestamp: Option<String>,
    pub speaker: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitStory {
    pub owner: String,
    pub topic: String,
    pub characters: Vec<String>,
    pub content: Vec<ContentItem>,
}

/// Inclusive `(start, end)` interval relative to the presented window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substory {
    pub sub_topic: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsolidationVerdict {
    pub substories: Vec<Substory>,
    pub new_topic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactBody {
    Triple { subject: String, predicate: String, object: String },
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticItem {
    pub fact: FactBody,
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryChoice {
    pub owner: String,
    pub topic: String,
}

/// Pattern proposed by query translation; `None` is a wildcard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub subject: Option<String>,
    pub predicate: Option<String>,
    pub object: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JudgeLabel {
    Correct,
    Wrong,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    StoryInit(Vec<InitStory>),
    Binding(Vec<BindingDecision>),
    Consolidation(ConsolidationVerdict),
    Semanticization(Vec<SemanticItem>),
    Coherence(Vec<StoryChoice>),
    GraphQuery(Vec<PatternSpec>),
    Answer(String),
    Judge(JudgeLabel),
}

type Shape<T> = Result<T, String>;

fn text_field(obj: &Map<String, Value>, keys: &[&str]) -> Shape<String> {
    for k in keys {
        if let Some(v) = obj.get(*k) {
            return text_value(v).ok_or_else(|| format!("`{k}` is not text"));
        }
    }
    Err(format!("missing `{}`", keys[0]))
}

fn text_value(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn non_empty(s: String, what: &str) -> Shape<String> {
    if s.trim().is_empty() {
        Err(format!("empty `{what}`"))
    } else {
        Ok(s)
    }
}

fn as_list(v: &Value) -> Shape<&Vec<Value>> {
    v.as_array().ok_or_else(|| "expected a list".to_string())
}

fn as_dict(v: &Value) -> Shape<&Map<String, Value>> {
    v.as_object().ok_or_else(|| "expected a dict".to_string())
}

/// Top level lists; a single dict is accepted as a one-element list.
fn items(v: &Value) -> Shape<Vec<&Value>> {
    match v {
        Value::Array(a) => Ok(a.iter().collect()),
        Value::Object(_) => Ok(vec![v]),
        _ => Err("expected a list".into()),
    }
}

fn coerce_binding(v: &Value) -> Shape<Vec<BindingDecision>> {
    items(v)?
        .into_iter()
        .map(|item| {
            let obj = as_dict(item)?;
            let excerpt = match obj.get("message_excerpt") {
                Some(Value::Array(parts)) => parts
                    .iter()
                    .map(|p| text_value(p).ok_or("bad excerpt part"))
                    .collect::<Result<Vec<_>, _>>()?
                    .join(" "),
                Some(other) => text_value(other).ok_or("`message_excerpt` is not text")?,
                None => return Err("missing `message_excerpt`".into()),
            };
            let action_raw = text_field(obj, &["action"])?;
            let action = match action_raw.to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
                "extend_story" => BindingAction::ExtendStory,
                "create_new_story" => BindingAction::CreateNewStory,
                other => return Err(format!("unknown action `{other}`")),
            };
            Ok(BindingDecision {
                message_excerpt: non_empty(excerpt, "message_excerpt")?,
                action,
                owner: non_empty(text_field(obj, &["owner"])?, "owner")?,
                topic: non_empty(text_field(obj, &["topic"])?, "topic")?,
            })
        })
        .collect()
}

fn coerce_content_item(v: &Value) -> Shape<ContentItem> {
    match v {
        Value::String(s) => Ok(ContentItem { timestamp: None, speaker: None, text: non_empty(s.trim().to_string(), "content")? }),
        Value::Array(parts) if parts.len() == 3 => {
            let f = |i: usize| text_value(&parts[i]).ok_or_else(|| "content tuple holds non-text".to_string());
            Ok(ContentItem { timestamp: Some(f(0)?), speaker: Some(f(1)?), text: non_empty(f(2)?, "utterance")? })
        }
        Value::Object(obj) => Ok(ContentItem {
            timestamp: text_field(obj, &["timestamp", "time", "date"]).ok(),
            speaker: text_field(obj, &["speaker"]).ok(),
            text: non_empty(text_field(obj, &["utterance", "message", "text", "content"])?, "utterance")?,
        }),
        _ => Err("unsupported content item".into()),
    }
}

fn coerce_init(v: &Value) -> Shape<Vec<InitStory>> {
    as_list(v)?
        .iter()
        .map(|item| {
            let obj = as_dict(item)?;
            let content = match obj.get("content") {
                Some(Value::String(s)) => s
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| ContentItem { timestamp: None, speaker: None, text: l.trim().to_string() })
                    .collect(),
                Some(Value::Array(parts)) => {
                    // a bare (timestamp, speaker, utterance) triple of strings
                    if parts.len() == 3 && parts.iter().all(Value::is_string) && looks_like_triple(parts) {
                        vec![coerce_content_item(&Value::Array(parts.clone()))?]
                    } else {
                        parts.iter().map(coerce_content_item).collect::<Shape<Vec<_>>>()?
                    }
                }
                Some(Value::Object(_)) => vec![coerce_content_item(&obj["content"])?],
                _ => return Err("missing `content`".into()),
            };
            let characters = match obj.get("characters") {
                Some(Value::Array(cs)) => cs.iter().filter_map(text_value).filter(|c| !c.is_empty()).collect(),
                Some(Value::String(s)) => s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
                _ => Vec::new(),
            };
            Ok(InitStory {
                owner: non_empty(text_field(obj, &["owner"])?, "owner")?,
                topic: non_empty(text_field(obj, &["topic"])?, "topic")?,
                characters,
                content,
            })
        })
        .collect()
}

fn looks_like_triple(parts: &[Value]) -> bool {
    // (timestamp, speaker, utterance): a short speaker in the middle and
    // a first element that is not itself a tagged message copy
    let speaker = parts[1].as_str().unwrap_or("");
    let first = parts[0].as_str().unwrap_or("");
    !speaker.contains(' ') && speaker.len() <= 40 && !first.contains(": ")
}

fn index(v: &Value) -> Shape<usize> {
    match v {
        Value::Number(n) => n
            .as_u64()
            .map(|u| u as usize)
            .ok_or_else(|| "index is not a non-negative integer".to_string()),
        Value::String(s) => s.trim().parse().map_err(|_| "index is not an integer".to_string()),
        _ => Err("index is not an integer".into()),
    }
}

fn coerce_consolidation(v: &Value) -> Shape<ConsolidationVerdict> {
    let obj = as_dict(v)?;
    let subs = obj.get("substories").ok_or("missing `substories`")?;
    let mut substories = Vec::new();
    for s in as_list(subs)? {
        let so = as_dict(s)?;
        let sub_topic = non_empty(text_field(so, &["sub_topic", "topic", "substory"])?, "sub_topic")?;
        let raw = ["indice", "indices", "interval", "range"]
            .iter()
            .find_map(|k| so.get(*k))
            .ok_or("missing `indice`")?;
        let (start, end) = match raw {
            Value::Array(pair) if pair.len() == 2 => (index(&pair[0])?, index(&pair[1])?),
            Value::Array(one) if one.len() == 1 => {
                let i = index(&one[0])?;
                (i, i)
            }
            other => {
                let i = index(other)?;
                (i, i)
            }
        };
        if start > end {
            return Err(format!("interval ({start}, {end}) is reversed"));
        }
        substories.push(Substory { sub_topic, start, end });
    }
    if !obj.contains_key("new_topic") {
        return Err("missing `new_topic`".into());
    }
    let new_topic = match &obj["new_topic"] {
        Value::Null => None,
        other => {
            let t = text_value(other).ok_or("`new_topic` is not text")?;
            if t.is_empty() || t.eq_ignore_ascii_case("none") || t.eq_ignore_ascii_case("null") {
                None
            } else {
                Some(t)
            }
        }
    };
    Ok(ConsolidationVerdict { substories, new_topic })
}

fn coerce_fact(v: &Value) -> Shape<FactBody> {
    match v {
        Value::String(s) => {
            let s = s.trim();
            let inner = s.strip_prefix('(').and_then(|x| x.strip_suffix(')')).unwrap_or(s);
            let parts: Vec<&str> = if inner.contains('|') {
                inner.split('|').collect()
            } else if s.starts_with('(') {
                inner.split(',').collect()
            } else {
                Vec::new()
            };
            if parts.len() == 3 && parts.iter().all(|p| !p.trim().is_empty()) {
                let p = |i: usize| parts[i].trim().trim_matches(|c| c == '\'' || c == '"').to_string();
                Ok(FactBody::Triple { subject: p(0), predicate: p(1), object: p(2) })
            } else {
                Ok(FactBody::Text(non_empty(s.to_string(), "fact")?))
            }
        }
        Value::Array(parts) if parts.len() == 3 => {
            let f = |i: usize| text_value(&parts[i]).filter(|s| !s.is_empty()).ok_or_else(|| "bad triple element".to_string());
            Ok(FactBody::Triple { subject: f(0)?, predicate: f(1)?, object: f(2)? })
        }
        Value::Object(obj) => Ok(FactBody::Triple {
            subject: non_empty(text_field(obj, &["subject"])?, "subject")?,
            predicate: non_empty(text_field(obj, &["predicate", "relation"])?, "predicate")?,
            object: non_empty(text_field(obj, &["object"])?, "object")?,
        }),
        _ => Err("unsupported fact".into()),
    }
}

fn coerce_semantic(v: &Value) -> Shape<Vec<SemanticItem>> {
    as_list(v)?
        .iter()
        .map(|item| {
            let obj = as_dict(item)?;
            let fact = match obj.get("fact") {
                Some(f) => coerce_fact(f)?,
                None if obj.contains_key("subject") => coerce_fact(item)?,
                None => return Err("missing `fact`".into()),
            };
            let timestamp = obj.get("timestamp").and_then(text_value).filter(|s| !s.is_empty());
            Ok(SemanticItem { fact, timestamp })
        })
        .collect()
}

fn coerce_choices(v: &Value) -> Shape<Vec<StoryChoice>> {
    items(v)?
        .into_iter()
        .map(|item| {
            let obj = as_dict(item)?;
            Ok(StoryChoice {
                owner: non_empty(text_field(obj, &["owner"])?, "owner")?,
                topic: non_empty(text_field(obj, &["topic"])?, "topic")?,
            })
        })
        .collect()
}

fn pattern_field(obj: &Map<String, Value>, key: &str) -> Shape<Option<String>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => {
            let s = text_value(v).ok_or_else(|| format!("`{key}` is not text"))?;
            if s.is_empty() || s == "*" || s == "?" || s.eq_ignore_ascii_case("none") {
                Ok(None)
            } else {
                Ok(Some(s))
            }
        }
    }
}

fn coerce_patterns(v: &Value) -> Shape<Vec<PatternSpec>> {
    items(v)?
        .into_iter()
        .map(|item| {
            let obj = as_dict(item)?;
            if !["subject", "predicate", "object"].iter().any(|k| obj.contains_key(*k)) {
                return Err("pattern has none of subject/predicate/object".into());
            }
            Ok(PatternSpec {
                subject: pattern_field(obj, "subject")?,
                predicate: pattern_field(obj, "predicate")?,
                object: pattern_field(obj, "object")?,
            })
        })
        .collect()
}

fn literal_verdict<T>(raw: &str, coerce: impl Fn(&Value) -> Shape<T>) -> Result<T, ReasonerError> {
    let candidates = candidate_literals(raw);
    if candidates.is_empty() {
        return Err(ReasonerError::ParseFailure(snippet(raw)));
    }
    let mut first_err = None;
    for c in &candidates {
        match coerce(c) {
            Ok(v) => return Ok(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(ReasonerError::SchemaMismatch(first_err.unwrap_or_default()))
}

fn snippet(raw: &str) -> String {
    let s: String = raw.chars().take(80).collect();
    if s.len() < raw.len() {
        format!("{s}...")
    } else {
        s
    }
}

pub fn parse_story_init(raw: &str) -> Result<Vec<InitStory>, ReasonerError> {
    literal_verdict(raw, coerce_init)
}

pub fn parse_binding(raw: &str) -> Result<Vec<BindingDecision>, ReasonerError> {
    literal_verdict(raw, coerce_binding)
}

pub fn parse_consolidation(raw: &str) -> Result<ConsolidationVerdict, ReasonerError> {
    literal_verdict(raw, coerce_consolidation)
}

pub fn parse_semanticization(raw: &str) -> Result<Vec<SemanticItem>, ReasonerError> {
    literal_verdict(raw, coerce_semantic)
}

pub fn parse_choices(raw: &str) -> Result<Vec<StoryChoice>, ReasonerError> {
    literal_verdict(raw, coerce_choices)
}

pub fn parse_patterns(raw: &str) -> Result<Vec<PatternSpec>, ReasonerError> {
    literal_verdict(raw, coerce_patterns)
}

/// Requires a `{"label": ...}` literal; bare text is a parse failure.
pub fn parse_judge(raw: &str) -> Result<JudgeLabel, ReasonerError> {
    for c in candidate_literals(raw) {
        let Some(label) = c.as_object().and_then(|o| o.get("label")).and_then(Value::as_str) else {
            continue;
        };
        return match label.trim().to_ascii_uppercase().as_str() {
            "CORRECT" => Ok(JudgeLabel::Correct),
            "WRONG" => Ok(JudgeLabel::Wrong),
            other => Err(ReasonerError::ParseFailure(format!("unknown judge label `{other}`"))),
        };
    }
    Err(ReasonerError::ParseFailure(snippet(raw)))
}

pub fn parse_structured(kind: PromptKind, raw: &str) -> Result<Verdict, ReasonerError> {
    Ok(match kind {
        PromptKind::StoryInit => Verdict::StoryInit(parse_story_init(raw)?),
        PromptKind::MemoryBinding => Verdict::Binding(parse_binding(raw)?),
        PromptKind::Consolidation => Verdict::Consolidation(parse_consolidation(raw)?),
        PromptKind::Semanticization => Verdict::Semanticization(parse_semanticization(raw)?),
        PromptKind::CoherenceRetrieve => Verdict::Coherence(parse_choices(raw)?),
        PromptKind::GraphQueryTranslate => Verdict::GraphQuery(parse_patterns(raw)?),
        PromptKind::Answer => Verdict::Answer(raw.trim().to_string()),
        PromptKind::Judge => Verdict::Judge(parse_judge(raw)?),
    })
}

impl Verdict {
    /// Canonical JSON-compatible form; `parse_structured` inverts it.
    pub fn to_value(&self) -> Value {
        match self {
            Verdict::StoryInit(stories) => Value::Array(
                stories
                    .iter()
                    .map(|s| {
                        let content: Vec<Value> = s
                            .content
                            .iter()
                            .map(|c| match (&c.timestamp, &c.speaker) {
                                (None, None) => json!(c.text),
                                _ => json!({"timestamp": c.timestamp, "speaker": c.speaker, "utterance": c.text}),
                            })
                            .collect();
                        json!({"owner": s.owner, "topic": s.topic, "characters": s.characters, "content": content})
                    })
                    .collect(),
            ),
            Verdict::Binding(ds) => Value::Array(
                ds.iter()
                    .map(|d| {
                        json!({"message_excerpt": d.message_excerpt, "action": d.action.as_str(),
                               "topic": d.topic, "owner": d.owner})
                    })
                    .collect(),
            ),
            Verdict::Consolidation(v) => json!({
                "substories": v.substories.iter()
                    .map(|s| json!({"sub_topic": s.sub_topic, "indice": [s.start, s.end]}))
                    .collect::<Vec<_>>(),
                "new_topic": v.new_topic,
            }),
            Verdict::Semanticization(items) => Value::Array(
                items
                    .iter()
                    .map(|i| {
                        let fact = match &i.fact {
                            FactBody::Triple { subject, predicate, object } => json!([subject, predicate, object]),
                            FactBody::Text(t) => json!(t),
                        };
                        match &i.timestamp {
                            Some(ts) => json!({"fact": fact, "timestamp": ts}),
                            None => json!({"fact": fact}),
                        }
                    })
                    .collect(),
            ),
            Verdict::Coherence(cs) => {
                Value::Array(cs.iter().map(|c| json!({"owner": c.owner, "topic": c.topic})).collect())
            }
            Verdict::GraphQuery(ps) => Value::Array(
                ps.iter()
                    .map(|p| json!({"subject": p.subject, "predicate": p.predicate, "object": p.object}))
                    .collect(),
            ),
            Verdict::Answer(s) => json!(s),
            Verdict::Judge(l) => json!({"label": match l { JudgeLabel::Correct => "CORRECT", JudgeLabel::Wrong => "WRONG" }}),
        }
    }

    pub fn to_canonical(&self) -> String {
        match self {
            Verdict::Answer(s) => s.clone(),
            other => other.to_value().to_string(),
        }
    }
}
