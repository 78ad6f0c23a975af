//! Evaluation over a finished run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::episodic::EpisodicBank;
use crate::metrics::{
    compression_rate, constraint_recall, coverage_rate, j_score, latency_percentiles, offline_complexity, CategoryRates,
    ComplexitySeries, Distribution, Instruction, Judgement, Percentiles, RecallReport,
};
use crate::orchestrator::{EngineConfig, IterationRecord, MemoryState, PathKind};
use crate::reasoner::{Backend, ClockMode, Meter, Reasoner, ReasonerError};
use crate::retrieval::{self, CachedEmbedder, HashedBow, RetrievalError, RetrievalResult, RetrieverKind};
use crate::rundir::{RunDir, RunDirError};
use crate::semantic::TripleStore;
use crate::transcript::{transcript_tokens, EvalQuestion, QuestionCategory, Transcript, WhitespaceCounter};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    RunDir(#[from] RunDirError),
    #[error("unknown eval mode {0:?} (expected coverage, compression, latency, jscore or recall)")]
    UnknownMode(String),
    #[error("k grid is empty or contains 0")]
    BadK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Coverage,
    Compression,
    Latency,
    Jscore,
    Recall,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Coverage, Mode::Compression, Mode::Latency, Mode::Jscore, Mode::Recall];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Coverage => "coverage",
            Mode::Compression => "compression",
            Mode::Latency => "latency",
            Mode::Jscore => "jscore",
            Mode::Recall => "recall",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| EvalError::UnknownMode(s.to_string()))
    }
}

/// Parses `coverage,latency`.
pub fn parse_modes(list: &str) -> Result<BTreeSet<Mode>, EvalError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub modes: BTreeSet<Mode>,
    /// k grid for coverage and compression.
    pub ks: Vec<usize>,
    /// k used for answering, judging and recall; the run's k when unset.
    pub k: Option<usize>,
    pub retriever: Option<RetrieverKind>,
    pub exclude_unjudgeable: bool,
    /// Concurrent judge calls.
    pub parallelism: usize,
    /// Constraint sets for recall; questions with evidence are used when unset.
    pub instructions: Option<Vec<Instruction>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.into_iter().collect(),
            ks: (1..=6).collect(),
            k: None,
            retriever: None,
            exclude_unjudgeable: false,
            parallelism: 4,
            instructions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySection {
    /// Online latency over memory-path iterations (all iterations if none).
    pub online: Percentiles,
    pub full_context: Option<Percentiles>,
    /// Offline latency over iterations that did offline work.
    pub offline: Option<Percentiles>,
    pub offline_complexity: ComplexitySeries,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub answer: String,
    pub judgement: Judgement,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JScoreSection {
    pub k: usize,
    pub rates: CategoryRates,
    pub answers: BTreeMap<String, AnswerTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario_id: String,
    pub retriever: RetrieverKind,
    pub questions: usize,
    pub full_history_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<BTreeMap<usize, CategoryRates>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compression: Option<BTreeMap<usize, Distribution>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jscore: Option<JScoreSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<RecallReport>,
    /// Modes that failed, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<Mode, String>,
}

/// Memory and backend for answering questions against a finished run.
pub struct Probe {
    pub bank: EpisodicBank,
    pub store: TripleStore,
    reasoner: Reasoner,
    embedder: CachedEmbedder<HashedBow>,
    semantic: bool,
}

impl Probe {
    pub fn new(bank: EpisodicBank, store: TripleStore, backend: Arc<dyn Backend>, clock: ClockMode, semantic: bool) -> Self {
        Self { bank, store, reasoner: Reasoner::new(backend, clock), embedder: CachedEmbedder::new(HashedBow::default()), semantic }
    }

    pub fn open(run: &RunDir, backend: Arc<dyn Backend>) -> Result<Self, RunDirError> {
        let cfg = run.config()?;
        Ok(Self::new(run.bank()?, run.store()?, backend, cfg.engine.clock, cfg.engine.semantic_retrieval))
    }

    pub fn retrieve(&self, question: &str, k: usize, kind: RetrieverKind) -> Result<RetrievalResult, RetrievalError> {
        let counter = WhitespaceCounter;
        match kind {
            RetrieverKind::Coherence => {
                let empty = TripleStore::new();
                let store = if self.semantic { &self.store } else { &empty };
                let mut meter = Meter::start(self.reasoner.clock());
                retrieval::retrieve_coherence(&self.bank, store, &self.reasoner, &mut meter, question, k, &counter)
            }
            RetrieverKind::Embedding => retrieval::retrieve_embedding(&self.bank, &self.embedder, question, k, &counter),
        }
    }

    pub fn answer(&self, question: &str, r: &RetrievalResult) -> Result<String, ReasonerError> {
        let mut meter = Meter::start(self.reasoner.clock());
        self.reasoner.answer(&mut meter, question, &r.render_stories(), &r.render_facts())
    }

    pub fn judge(&self, q: &EvalQuestion, generated: &str) -> Judgement {
        let mut meter = Meter::start(self.reasoner.clock());
        match self.reasoner.judge(&mut meter, &q.text, &q.gold_answer, generated) {
            Ok(l) if l == crate::reasoner::JudgeLabel::Correct => Judgement::Correct,
            Ok(_) => Judgement::Wrong,
            Err(e @ (ReasonerError::ParseFailure(_) | ReasonerError::SchemaMismatch(_))) => Judgement::Unjudgeable(e.to_string()),
            Err(e) => Judgement::Failed(e.to_string()),
        }
    }
}

/// One interactive query against a built memory.
#[derive(Debug, Clone, Serialize)]
pub struct QueryTrace {
    pub question: String,
    pub answer: String,
    pub retrieval: RetrievalResult,
    pub compression_rate: Option<f64>,
}

pub fn query(probe: &Probe, transcript: &Transcript, question: &str, k: usize, kind: RetrieverKind) -> Result<QueryTrace, RetrievalError> {
    let retrieval = probe.retrieve(question, k, kind)?;
    let answer = probe.answer(question, &retrieval)?;
    let full = transcript_tokens(transcript, &WhitespaceCounter);
    let compression_rate = compression_rate(full, retrieval.retrieved_token_count).ok();
    Ok(QueryTrace { question: question.to_string(), answer, retrieval, compression_rate })
}

fn retrievals(
    probe: &Probe,
    questions: &[(String, String)],
    k: usize,
    kind: RetrieverKind,
) -> Result<BTreeMap<String, RetrievalResult>, String> {
    let mut out = BTreeMap::new();
    for (id, text) in questions {
        match probe.retrieve(text, k, kind) {
            Ok(r) => {
                out.insert(id.clone(), r);
            }
            Err(RetrievalError::Reasoner(e)) if !e.is_fatal() => {
                warn!(question = %id, error = %e, "retrieval failed; counted as empty");
                out.insert(id.clone(), RetrievalResult::empty(kind, k));
            }
            Err(e) => return Err(format!("question {id} at k={k}: {e}")),
        }
    }
    Ok(out)
}

fn turn_sets(r: &BTreeMap<String, RetrievalResult>) -> BTreeMap<String, BTreeSet<String>> {
    r.iter().map(|(id, r)| (id.clone(), r.retrieved_turn_ids.clone())).collect()
}

pub fn latency_section(records: &[IterationRecord]) -> Result<LatencySection, String> {
    let pick = |p: PathKind| records.iter().filter(|r| r.path == p).map(|r| r.online_latency_us).collect::<Vec<_>>();
    let mem = pick(PathKind::Memory);
    let full = pick(PathKind::FullContext);
    let online = if mem.is_empty() { records.iter().map(|r| r.online_latency_us).collect() } else { mem };
    let offline: Vec<u64> = records.iter().map(|r| r.offline_latency_us).filter(|&u| u > 0).collect();
    Ok(LatencySection {
        online: latency_percentiles(&online).map_err(|e| e.to_string())?,
        full_context: latency_percentiles(&full).ok(),
        offline: latency_percentiles(&offline).ok(),
        offline_complexity: offline_complexity(records),
    })
}

/// Everything an evaluation reads from a run. Records and memory are kept
/// as results so that a missing file only fails the modes that need it.
pub struct RunData {
    pub engine: EngineConfig,
    pub transcript: Transcript,
    pub records: Result<Vec<IterationRecord>, String>,
    pub memory: Result<MemoryState, String>,
}

impl RunData {
    pub fn load(run: &RunDir) -> Result<Self, EvalError> {
        let engine = run.config()?.engine;
        let transcript = run.transcript()?;
        let records = run.records().map_err(|e| e.to_string());
        let memory = run
            .bank()
            .and_then(|bank| Ok(MemoryState { bank, store: run.store()? }))
            .map_err(|e| e.to_string());
        Ok(Self { engine, transcript, records, memory })
    }
}

/// Runs the selected modes; a failing mode is recorded and the rest go on.
pub fn evaluate(run: &RunDir, backend: Arc<dyn Backend>, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    evaluate_data(&RunData::load(run)?, backend, opts)
}

pub fn evaluate_data(data: &RunData, backend: Arc<dyn Backend>, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if opts.ks.is_empty() || opts.ks.contains(&0) || opts.k == Some(0) {
        return Err(EvalError::BadK);
    }
    let transcript = &data.transcript;
    let kind = opts.retriever.unwrap_or(data.engine.retriever);
    let k_run = opts.k.unwrap_or(data.engine.k);
    let counter = WhitespaceCounter;
    let full_history_tokens = transcript_tokens(transcript, &counter);
    let mut report = EvalReport {
        scenario_id: transcript.scenario_id.clone(),
        retriever: kind,
        questions: transcript.questions.len(),
        full_history_tokens,
        coverage: None,
        compression: None,
        latency: None,
        jscore: None,
        recall: None,
        errors: BTreeMap::new(),
    };

    if opts.modes.contains(&Mode::Latency) {
        match data.records.clone().and_then(|r| latency_section(&r)) {
            Ok(l) => report.latency = Some(l),
            Err(e) => {
                report.errors.insert(Mode::Latency, e);
            }
        }
    }

    let needs_memory = opts.modes.iter().any(|m| *m != Mode::Latency);
    if !needs_memory {
        return Ok(report);
    }
    let probe = match &data.memory {
        Ok(m) => Probe::new(m.bank.clone(), m.store.clone(), backend, data.engine.clock, data.engine.semantic_retrieval),
        Err(e) => {
            for m in opts.modes.iter().filter(|m| **m != Mode::Latency) {
                report.errors.insert(*m, e.clone());
            }
            return Ok(report);
        }
    };
    let qs: Vec<(String, String)> = transcript.questions.iter().map(|q| (q.question_id.clone(), q.text.clone())).collect();

    // one retrieval pass per k, shared by coverage and compression
    let want_grid = opts.modes.contains(&Mode::Coverage) || opts.modes.contains(&Mode::Compression);
    if want_grid {
        let mut cov = BTreeMap::new();
        let mut comp = BTreeMap::new();
        let mut failed = None;
        for &k in &opts.ks {
            match retrievals(&probe, &qs, k, kind) {
                Ok(r) => {
                    cov.insert(k, coverage_rate(&transcript.questions, &turn_sets(&r)));
                    let rates: Vec<f64> = r
                        .values()
                        .filter_map(|x| compression_rate(full_history_tokens, x.retrieved_token_count).ok())
                        .collect();
                    if let Some(d) = Distribution::of(&rates) {
                        comp.insert(k, d);
                    }
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        for (mode, ok) in [(Mode::Coverage, failed.is_none()), (Mode::Compression, failed.is_none() && full_history_tokens > 0)] {
            if !opts.modes.contains(&mode) {
                continue;
            }
            if !ok {
                let why = failed.clone().unwrap_or_else(|| "full history has zero tokens".into());
                report.errors.insert(mode, why);
            } else if mode == Mode::Coverage {
                report.coverage = Some(cov.clone());
            } else {
                report.compression = Some(comp.clone());
            }
        }
    }

    if opts.modes.contains(&Mode::Jscore) {
        match jscore(&probe, &transcript.questions, k_run, kind, opts) {
            Ok(j) => report.jscore = Some(j),
            Err(e) => {
                report.errors.insert(Mode::Jscore, e);
            }
        }
    }

    if opts.modes.contains(&Mode::Recall) {
        let instructions = opts.instructions.clone().unwrap_or_else(|| {
            transcript
                .questions
                .iter()
                .map(|q| Instruction { id: q.question_id.clone(), query: q.text.clone(), constraint_turn_ids: q.evidence_turn_ids.clone() })
                .collect()
        });
        let iq: Vec<(String, String)> = instructions.iter().map(|i| (i.id.clone(), i.query.clone())).collect();
        match retrievals(&probe, &iq, k_run, kind) {
            Ok(r) => report.recall = Some(constraint_recall(&instructions, &turn_sets(&r))),
            Err(e) => {
                report.errors.insert(Mode::Recall, e);
            }
        }
    }
    info!(modes = opts.modes.len(), errors = report.errors.len(), "evaluation finished");
    Ok(report)
}

fn jscore(probe: &Probe, questions: &[EvalQuestion], k: usize, kind: RetrieverKind, opts: &EvalOptions) -> Result<JScoreSection, String> {
    let mut answers = BTreeMap::new();
    for q in questions {
        let r = match probe.retrieve(&q.text, k, kind) {
            Ok(r) => r,
            Err(RetrievalError::Reasoner(e)) if e.is_fatal() => return Err(format!("question {}: {e}", q.question_id)),
            Err(e) => {
                warn!(question = %q.question_id, error = %e, "retrieval failed; answering without memory");
                RetrievalResult::empty(kind, k)
            }
        };
        let selected = r.selections.iter().map(|s| s.leaf.title().to_string()).collect();
        let answer = match probe.answer(&q.text, &r) {
            Ok(a) => a,
            Err(e) if e.is_fatal() => return Err(format!("question {}: {e}", q.question_id)),
            Err(e) => {
                warn!(question = %q.question_id, error = %e, "answer failed");
                String::new()
            }
        };
        answers.insert(q.question_id.clone(), (answer, selected));
    }

    // judge calls are independent; run them in bounded batches
    let items: Vec<(&EvalQuestion, &String)> = questions.iter().map(|q| (q, &answers[&q.question_id].0)).collect();
    let mut judged: BTreeMap<String, Judgement> = BTreeMap::new();
    for batch in items.chunks(opts.parallelism.max(1)) {
        let results: Vec<(String, Judgement)> = std::thread::scope(|s| {
            let handles: Vec<_> = batch.iter().map(|(q, a)| s.spawn(move || (q.question_id.clone(), probe.judge(q, a)))).collect();
            handles.into_iter().map(|h| h.join().expect("judge thread panicked")).collect()
        });
        judged.extend(results);
    }
    let rates = j_score(questions, &judged, opts.exclude_unjudgeable);
    let answers = answers
        .into_iter()
        .map(|(id, (answer, selected))| {
            let judgement = judged.remove(&id).unwrap_or(Judgement::Failed("not judged".into()));
            (id, AnswerTrace { answer, judgement, selected })
        })
        .collect();
    Ok(JScoreSection { k, rates, answers })
}

fn pct(p: Option<f64>) -> String {
    p.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
}

/// Human-readable summary: one row per question category.
pub fn render_table(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {}  retriever {}  questions {}  history tokens {}",
        r.scenario_id, r.retriever, r.questions, r.full_history_tokens
    );
    let ks: Vec<usize> = r.coverage.as_ref().map(|c| c.keys().copied().collect()).unwrap_or_default();
    let mut header = format!("{:<12}", "category");
    if r.jscore.is_some() {
        header.push_str(&format!(" {:>8}", "J"));
    }
    for k in &ks {
        header.push_str(&format!(" {:>7}", format!("cov@{k}")));
    }
    let _ = writeln!(out, "{header}");
    let mut rows: Vec<Option<QuestionCategory>> = QuestionCategory::ALL.into_iter().map(Some).collect();
    rows.push(None);
    for cat in rows {
        let label = cat.map(|c| c.label().to_string()).unwrap_or_else(|| "overall".into());
        let pick = |c: &CategoryRates| match cat {
            Some(cat) => c.per_category.get(&cat).and_then(|x| x.percent),
            None => c.overall.percent,
        };
        let j = r.jscore.as_ref().map(|j| pick(&j.rates));
        let covs: Vec<Option<f64>> = ks.iter().map(|k| r.coverage.as_ref().and_then(|c| pick(&c[k]))).collect();
        if cat.is_some() && j.flatten().is_none() && covs.iter().all(Option::is_none) {
            continue;
        }
        let mut line = format!("{label:<12}");
        if let Some(j) = j {
            line.push_str(&format!(" {:>8}", pct(j)));
        }
        for c in covs {
            line.push_str(&format!(" {:>7}", pct(c)));
        }
        let _ = writeln!(out, "{line}");
    }
    if let Some(c) = &r.compression {
        let _ = writeln!(out, "compression (median [q1, q3])");
        for (k, d) in c {
            let _ = writeln!(out, "  k={k}: {:.1} [{:.1}, {:.1}]", d.median, d.q1, d.q3);
        }
    }
    if let Some(l) = &r.latency {
        let ms = |u: u64| u as f64 / 1000.0;
        let row = |name: &str, p: &Percentiles| {
            format!("  {name:<12} p50 {:.1}  p90 {:.1}  p95 {:.1}  p99 {:.1} ms\n", ms(p.p50), ms(p.p90), ms(p.p95), ms(p.p99))
        };
        out.push_str("latency\n");
        out.push_str(&row("online", &l.online));
        if let Some(p) = &l.full_context {
            out.push_str(&row("full context", p));
        }
        if let Some(p) = &l.offline {
            out.push_str(&row("offline", p));
        }
        if let (Some(s), Some(r2)) = (l.offline_complexity.slope_us_per_token, l.offline_complexity.r_squared) {
            let _ = writeln!(out, "  offline cost {:.1} us/token (r2 {r2:.3})", s);
        }
    }
    if let Some(rc) = &r.recall {
        let _ = writeln!(out, "constraint recall {}", pct(rc.mean));
    }
    for (m, e) in &r.errors {
        let _ = writeln!(out, "{m} failed: {e}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse() {
        let m = parse_modes("coverage, latency").unwrap();
        assert_eq!(m, BTreeSet::from([Mode::Coverage, Mode::Latency]));
        assert!(matches!(parse_modes("coverage,bleu"), Err(EvalError::UnknownMode(_))));
        assert!(parse_modes("").unwrap().is_empty());
    }

    #[test]
    fn latency_section_splits_paths() {
        let rec = |i: u64, path: PathKind, on: u64, off: u64| IterationRecord {
            iteration: i,
            turn_id: format!("t{i}"),
            path,
            online_latency_us: on,
            offline_latency_us: off,
            mem_init: false,
            bound_fragments: 0,
            consolidations: 0,
            semanticized: 0,
            offline_tokens: off as usize,
            narratives: 0,
            fragments: 0,
            subplots: 0,
            facts: 0,
            retrieval: None,
            transitions: vec![],
            consolidation_events: vec![],
            online_error: None,
            offline_errors: vec![],
            warnings: vec![],
        };
        let records = vec![rec(1, PathKind::FullContext, 10, 0), rec(2, PathKind::Memory, 30, 5), rec(3, PathKind::Memory, 20, 7)];
        let l = latency_section(&records).unwrap();
        assert_eq!(l.online.p50, 20);
        assert_eq!(l.online.p99, 30);
        assert_eq!(l.full_context.unwrap().p50, 10);
        assert_eq!(l.offline.unwrap().p90, 7);
        assert_eq!(l.offline_complexity.points.last(), Some(&(3, 12, 12)));
    }
}
