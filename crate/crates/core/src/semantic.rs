//! Embedded triple store for semantic memory.
//!
//! Facts are matched on normalised (trimmed, whitespace-collapsed,
//! case-folded) subject, predicate and object; original casing is kept for
//! display. The on-disk form is an append-only JSON-lines log that is
//! replayed on open.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("pattern must fix at least one of subject, predicate, object")]
    AllWildcard,
    #[error("entity must be non-empty")]
    EmptyEntity,
    #[error("corrupt store log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleFact {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub timestamp: NaiveDateTime,
    pub source_narrative_id: String,
    pub source_turn_ids: BTreeSet<String>,
}

impl TripleFact {
    pub fn is_valid(&self) -> bool {
        !normalize(&self.subject).is_empty() && !normalize(&self.predicate).is_empty() && !normalize(&self.object).is_empty()
    }

    fn key(&self) -> FactKey {
        (normalize(&self.subject), normalize(&self.predicate), normalize(&self.object), self.timestamp)
    }

    pub fn display(&self) -> String {
        format!("({}, {}, {})", self.subject.trim(), self.predicate.trim(), self.object.trim())
    }
}

type FactKey = (String, String, String, NaiveDateTime);

pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// `None` fields are wildcards; at least one must be set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriplePattern {
    subject: Option<String>,
    predicate: Option<String>,
    object: Option<String>,
}

impl TriplePattern {
    pub fn new(subject: Option<&str>, predicate: Option<&str>, object: Option<&str>) -> Result<Self, SemanticError> {
        let norm = |f: Option<&str>| f.map(normalize).filter(|s| !s.is_empty());
        let p = Self { subject: norm(subject), predicate: norm(predicate), object: norm(object) };
        if p.subject.is_none() && p.predicate.is_none() && p.object.is_none() {
            return Err(SemanticError::AllWildcard);
        }
        Ok(p)
    }

    pub fn subject(s: &str) -> Result<Self, SemanticError> {
        Self::new(Some(s), None, None)
    }

    pub fn object(o: &str) -> Result<Self, SemanticError> {
        Self::new(None, None, Some(o))
    }

    pub fn fields(&self) -> (Option<&str>, Option<&str>, Option<&str>) {
        (self.subject.as_deref(), self.predicate.as_deref(), self.object.as_deref())
    }

    pub fn matches(&self, f: &TripleFact) -> bool {
        let ok = |want: &Option<String>, have: &str| want.as_ref().is_none_or(|w| *w == normalize(have));
        ok(&self.subject, &f.subject) && ok(&self.predicate, &f.predicate) && ok(&self.object, &f.object)
    }
}

#[derive(Debug, Default, Clone)]
pub struct TripleStore {
    facts: Vec<TripleFact>,
    keys: HashSet<FactKey>,
    by_subject: HashMap<String, Vec<usize>>,
    by_predicate: HashMap<String, Vec<usize>>,
    by_object: HashMap<String, Vec<usize>>,
    log: Option<PathBuf>,
}

impl PartialEq for TripleStore {
    fn eq(&self, other: &Self) -> bool {
        self.facts == other.facts
    }
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// All facts in insertion order.
    pub fn facts(&self) -> &[TripleFact] {
        &self.facts
    }

    /// Opens (or creates) a log-backed store, rebuilding indexes from the log.
    /// Later inserts are appended to the same file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SemanticError> {
        let path = path.as_ref();
        let mut store = if path.exists() { Self::load_jsonl(path)? } else { Self::new() };
        if !path.exists() {
            File::create(path)?;
        }
        store.log = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, SemanticError> {
        let reader = BufReader::new(File::open(path)?);
        let mut store = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fact: TripleFact = serde_json::from_str(&line)
                .map_err(|e| SemanticError::CorruptLog { line: i + 1, message: e.to_string() })?;
            store.insert_one(fact);
        }
        Ok(store)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for f in &self.facts {
            out.push_str(&serde_json::to_string(f).expect("fact serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), SemanticError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// N-Triples-like text dump, one fact per line.
    pub fn export_ntriples(&self) -> String {
        let q = |s: &str| format!("\"{}\"", s.trim().replace('\\', "\\\\").replace('"', "\\\""));
        let mut out = String::new();
        for f in &self.facts {
            out.push_str(&format!(
                "{} {} {} {} .\n",
                q(&f.subject),
                q(&f.predicate),
                q(&f.object),
                q(&f.timestamp.format("%Y-%m-%dT%H:%M:%S").to_string())
            ));
        }
        out
    }

    fn insert_one(&mut self, fact: TripleFact) -> bool {
        if !fact.is_valid() {
            warn!(fact = %fact.display(), "invalid fact skipped");
            return false;
        }
        let key = fact.key();
        if self.keys.contains(&key) {
            return false;
        }
        let idx = self.facts.len();
        self.by_subject.entry(key.0.clone()).or_default().push(idx);
        self.by_predicate.entry(key.1.clone()).or_default().push(idx);
        self.by_object.entry(key.2.clone()).or_default().push(idx);
        self.keys.insert(key);
        self.facts.push(fact);
        true
    }

    /// Inserts valid, previously unseen facts; returns how many were added.
    pub fn insert_facts(&mut self, facts: impl IntoIterator<Item = TripleFact>) -> Result<usize, SemanticError> {
        let mut added = Vec::new();
        for f in facts {
            if self.insert_one(f) {
                added.push(self.facts.len() - 1);
            }
        }
        if let (Some(path), false) = (&self.log, added.is_empty()) {
            let mut file = OpenOptions::new().append(true).create(true).open(path)?;
            for i in &added {
                writeln!(file, "{}", serde_json::to_string(&self.facts[*i]).expect("fact serializes"))?;
            }
        }
        Ok(added.len())
    }

    fn ordered(&self, mut idx: Vec<usize>) -> Vec<TripleFact> {
        idx.sort_by_key(|&i| (self.facts[i].timestamp, i));
        idx.dedup();
        idx.into_iter().map(|i| self.facts[i].clone()).collect()
    }

    /// Facts matching every fixed field, ordered by timestamp then insertion.
    pub fn query(&self, p: &TriplePattern) -> Vec<TripleFact> {
        let empty = Vec::new();
        let lists = [
            p.subject.as_ref().map(|s| self.by_subject.get(s).unwrap_or(&empty)),
            p.predicate.as_ref().map(|s| self.by_predicate.get(s).unwrap_or(&empty)),
            p.object.as_ref().map(|s| self.by_object.get(s).unwrap_or(&empty)),
        ];
        let Some(seed) = lists.iter().flatten().min_by_key(|l| l.len()) else {
            return Vec::new();
        };
        let hits = seed.iter().copied().filter(|&i| p.matches(&self.facts[i])).collect();
        self.ordered(hits)
    }

    /// Every fact with `entity` as subject or object.
    pub fn entity_neighborhood(&self, entity: &str) -> Result<Vec<TripleFact>, SemanticError> {
        let e = normalize(entity);
        if e.is_empty() {
            return Err(SemanticError::EmptyEntity);
        }
        let mut idx: Vec<usize> = self.by_subject.get(&e).cloned().unwrap_or_default();
        idx.extend(self.by_object.get(&e).into_iter().flatten());
        Ok(self.ordered(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(d: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2023, 5, d).unwrap().and_hms_opt(12, 0, 0).unwrap()
    }

    fn fact(s: &str, p: &str, o: &str, d: u32) -> TripleFact {
        TripleFact {
            subject: s.into(),
            predicate: p.into(),
            object: o.into(),
            timestamp: ts(d),
            source_narrative_id: "n001".into(),
            source_turn_ids: BTreeSet::from(["s1t1".into()]),
        }
    }

    #[test]
    fn dedup_on_normalised_key() {
        let mut st = TripleStore::new();
        assert_eq!(st.insert_facts([fact("Caroline", "paints", "identity-themed artwork", 1)]).unwrap(), 1);
        assert_eq!(st.insert_facts([fact(" caroline ", "PAINTS", "identity-themed  artwork", 1)]).unwrap(), 0);
        assert_eq!(st.insert_facts([fact("Caroline", "paints", "identity-themed artwork", 2)]).unwrap(), 1);
        assert_eq!(st.insert_facts([fact("a", "b", "c", 1), fact("a", "b", "d", 1), fact("x", "y", "z", 1)]).unwrap(), 3);
        assert_eq!(st.len(), 5);
    }

    #[test]
    fn invalid_facts_skipped() {
        let mut st = TripleStore::new();
        assert_eq!(st.insert_facts([fact("", "b", "c", 1), fact("a", " ", "c", 1)]).unwrap(), 0);
    }

    #[test]
    fn all_wildcard_rejected() {
        assert!(matches!(TriplePattern::new(None, None, None), Err(SemanticError::AllWildcard)));
        assert!(matches!(TriplePattern::new(Some("  "), None, None), Err(SemanticError::AllWildcard)));
    }

    #[test]
    fn single_match_and_order() {
        let mut st = TripleStore::new();
        st.insert_facts([fact("John", "admires", "LeBron James", 3), fact("Tim", "reads", "Harry Potter", 1)]).unwrap();
        let got = st.query(&TriplePattern::subject("john").unwrap());
        assert_eq!(got, vec![fact("John", "admires", "LeBron James", 3)]);
        st.insert_facts([fact("John", "plays", "basketball", 1)]).unwrap();
        let got = st.query(&TriplePattern::subject("John").unwrap());
        assert_eq!(got[0].predicate, "plays");
    }

    #[test]
    fn neighborhood_is_symmetric() {
        let mut st = TripleStore::new();
        st.insert_facts([fact("John", "admires", "LeBron James", 1), fact("LeBron James", "plays for", "Lakers", 2)])
            .unwrap();
        assert_eq!(st.entity_neighborhood("lebron james").unwrap().len(), 2);
        assert!(st.entity_neighborhood("nobody").unwrap().is_empty());
        assert_eq!(st.entity_neighborhood("Lakers").unwrap()[0].subject, "LeBron James");
    }

    #[test]
    fn log_reopen_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("semantic.jsonl");
        let mut st = TripleStore::open(&p).unwrap();
        st.insert_facts([fact("a", "b", "c", 1), fact("a", "b", "c", 1), fact("d", "e", "f", 2)]).unwrap();
        let again = TripleStore::open(&p).unwrap();
        assert_eq!(again, st);
        assert_eq!(again.query(&TriplePattern::object("F").unwrap()).len(), 1);
        assert!(st.export_ntriples().starts_with("\"a\" \"b\" \"c\" \"2023-05-01T12:00:00\" ."));
    }

    #[test]
    fn corrupt_log_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        fs::write(&p, "{\"subject\": 1\n").unwrap();
        assert!(matches!(TripleStore::load_jsonl(&p), Err(SemanticError::CorruptLog { line: 1, .. })));
    }
}
