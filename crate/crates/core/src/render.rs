//! Text layouts shared by prompt bindings and excerpt recovery.
//!
//! Every turn handed to the reasoner is written as
//! `[s1t3] (1:56 pm on 8 May, 2023) Caroline: utterance`. The bracketed tag
//! lets excerpts copied back by the backend be traced to their source turns.

use std::sync::OnceLock;

use regex::Regex;

use crate::transcript::{format_datetime, Turn};

pub fn turn_line(t: &Turn) -> String {
    format!(
        "[{}] ({}) {}: {}",
        t.turn_id,
        format_datetime(&t.timestamp),
        t.speaker,
        t.text
    )
}

pub fn turn_lines<'a>(turns: impl IntoIterator<Item = &'a Turn>) -> String {
    turns.into_iter().map(turn_line).collect::<Vec<_>>().join("\n")
}

/// Collapses internal whitespace runs and trims.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*(s\d+t\d+r?(?:\s*,\s*s\d+t\d+r?)*)\s*\]").expect("static regex"))
}

/// All turn ids mentioned as `[s1t2]` or `[s1t2, s1t3]` tags, in order.
pub fn turn_tags(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for caps in tag_regex().captures_iter(s) {
        for id in caps[1].split(',') {
            let id = id.trim().to_string();
            if !out.contains(&id) {
                out.push(id);
            }
        }
    }
    out
}

/// A message copy as returned by the backend, split into its parts where
/// they can be recognised.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExcerptParts {
    pub turn_ids: Vec<String>,
    pub timestamp: Option<String>,
    pub speaker: Option<String>,
    pub utterance: String,
}

impl ExcerptParts {
    pub fn from_fields(timestamp: Option<String>, speaker: Option<String>, utterance: String) -> Self {
        let mut parts = parse_excerpt(&utterance);
        if parts.timestamp.is_none() {
            parts.timestamp = timestamp.filter(|s| !s.trim().is_empty());
        }
        if parts.speaker.is_none() {
            parts.speaker = speaker.filter(|s| !s.trim().is_empty());
        }
        if let Some(ts) = &parts.timestamp {
            for id in turn_tags(ts) {
                if !parts.turn_ids.contains(&id) {
                    parts.turn_ids.push(id);
                }
            }
        }
        parts
    }
}

fn excerpt_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?s)^\s*(?:\[(?P<tags>[^\]]*)\]\s*)?(?:\((?P<ts>[^)]*)\)\s*)?(?:(?P<speaker>[A-Z][\w .'-]{0,40}?):\s+)?(?P<body>.*)$",
        )
        .expect("static regex")
    })
}

/// Splits `[tag] (timestamp) Speaker: utterance`; every prefix is optional.
pub fn parse_excerpt(s: &str) -> ExcerptParts {
    let turn_ids = turn_tags(s);
    let Some(caps) = excerpt_regex().captures(s) else {
        return ExcerptParts { turn_ids, utterance: normalize_ws(s), ..Default::default() };
    };
    let body = caps.name("body").map(|m| m.as_str()).unwrap_or("");
    ExcerptParts {
        turn_ids,
        timestamp: caps.name("ts").map(|m| m.as_str().trim().to_string()).filter(|s| !s.is_empty()),
        speaker: caps
            .name("speaker")
            .map(|m| m.as_str().trim().to_string())
            .filter(|s| !s.is_empty()),
        utterance: normalize_ws(body),
    }
}

/// Lower-cased alphanumeric word tokens.
pub fn word_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn excerpt_with_all_parts() {
        let p = parse_excerpt("[s1t3] (1:56 pm on 8 May, 2023) Caroline: I went to a  support group.");
        assert_eq!(p.turn_ids, ["s1t3"]);
        assert_eq!(p.timestamp.as_deref(), Some("1:56 pm on 8 May, 2023"));
        assert_eq!(p.speaker.as_deref(), Some("Caroline"));
        assert_eq!(p.utterance, "I went to a support group.");
    }

    #[test]
    fn excerpt_without_prefixes() {
        let p = parse_excerpt("went hiking last weekend");
        assert!(p.turn_ids.is_empty());
        assert_eq!(p.speaker, None);
        assert_eq!(p.utterance, "went hiking last weekend");
    }

    #[test]
    fn multi_tag() {
        assert_eq!(turn_tags("[s1t1, s1t2r] x [s3t4]"), ["s1t1", "s1t2r", "s3t4"]);
    }
}
