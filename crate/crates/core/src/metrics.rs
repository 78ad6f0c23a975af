//! Evaluation metrics and the memory evolvement timeline.
//!
//! Everything here is a pure function over question sets, retrieval traces
//! and run artifacts. The [`eval`](crate::eval) driver wires them to a run
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::episodic::BankSnapshot;
use crate::orchestrator::IterationRecord;
use crate::transcript::{EvalQuestion, QuestionCategory};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("full history has zero tokens")]
    ZeroHistory,
    #[error("no latency samples")]
    EmptySamples,
    #[error("run artifact has no snapshots")]
    MissingSnapshots,
}

/// `hits / total` as a percentage; `None` when nothing was counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: usize,
    pub total: usize,
    pub percent: Option<f64>,
}

impl Rate {
    pub fn new(hits: usize, total: usize) -> Self {
        let percent = (total > 0).then(|| 100.0 * hits as f64 / total as f64);
        Self { hits, total, percent }
    }

    fn bump(&mut self, hit: bool) {
        *self = Rate::new(self.hits + usize::from(hit), self.total + 1);
    }
}

/// Rates broken down by question category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryRates {
    pub per_category: BTreeMap<QuestionCategory, Rate>,
    pub overall: Rate,
    /// Question ids left out of the denominator, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub excluded: BTreeMap<String, String>,
}

impl CategoryRates {
    fn count(&mut self, cat: QuestionCategory, hit: bool) {
        self.per_category.entry(cat).or_default().bump(hit);
        self.overall.bump(hit);
    }

    fn exclude(&mut self, id: &str, why: impl Into<String>) {
        let why = why.into();
        warn!(question = id, reason = %why, "question excluded");
        self.excluded.insert(id.to_string(), why);
    }
}

/// A question is covered iff all of its evidence turns were retrieved.
/// Questions without evidence annotations are excluded; a question with no
/// retrieval trace counts as retrieving nothing.
pub fn coverage_rate(questions: &[EvalQuestion], retrieved: &BTreeMap<String, BTreeSet<String>>) -> CategoryRates {
    let empty = BTreeSet::new();
    let mut out = CategoryRates::default();
    for q in questions {
        if q.evidence_turn_ids.is_empty() {
            out.exclude(&q.question_id, "missing evidence annotation");
            continue;
        }
        let got = retrieved.get(&q.question_id).unwrap_or(&empty);
        out.count(q.category, q.evidence_turn_ids.is_subset(got));
    }
    out
}

/// Share of the history left out of the query context, in percent.
pub fn compression_rate(full_history_tokens: usize, retrieved_tokens: usize) -> Result<f64, MetricsError> {
    if full_history_tokens == 0 {
        return Err(MetricsError::ZeroHistory);
    }
    let used = retrieved_tokens as f64 / full_history_tokens as f64;
    Ok((100.0 * (1.0 - used)).clamp(0.0, 100.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: u64,
    pub p90: u64,
    pub p95: u64,
    pub p99: u64,
}

/// Nearest-rank value for percentile `q` of an ascending slice.
pub fn nearest_rank(sorted: &[u64], q: u32) -> u64 {
    let n = sorted.len();
    let rank = (q as usize * n).div_ceil(100).max(1);
    sorted[rank.min(n) - 1]
}

pub fn latency_percentiles(samples: &[u64]) -> Result<Percentiles, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    Ok(Percentiles { p50: nearest_rank(&s, 50), p90: nearest_rank(&s, 90), p95: nearest_rank(&s, 95), p99: nearest_rank(&s, 99) })
}

/// Median and quartiles of a distribution of percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Distribution {
    /// Nearest-rank summary; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: usize| v[(q * v.len()).div_ceil(100).max(1) - 1];
        Some(Self { n: v.len(), min: v[0], q1: at(25), median: at(50), q3: at(75), max: v[v.len() - 1] })
    }
}

/// Judge outcome for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgement {
    Correct,
    Wrong,
    /// The judge replied but no label could be read.
    Unjudgeable(String),
    /// The judge call itself failed.
    Failed(String),
}

/// J-score from per-question judgements. Unjudgeable and failed questions
/// count as wrong unless `exclude_unjudgeable` is set.
pub fn j_score(questions: &[EvalQuestion], judged: &BTreeMap<String, Judgement>, exclude_unjudgeable: bool) -> CategoryRates {
    let mut out = CategoryRates::default();
    for q in questions {
        match judged.get(&q.question_id) {
            Some(Judgement::Correct) => out.count(q.category, true),
            Some(Judgement::Wrong) => out.count(q.category, false),
            Some(Judgement::Unjudgeable(why) | Judgement::Failed(why)) => {
                if exclude_unjudgeable {
                    out.exclude(&q.question_id, why.clone());
                } else {
                    out.count(q.category, false);
                }
            }
            None if exclude_unjudgeable => out.exclude(&q.question_id, "not judged"),
            None => out.count(q.category, false),
        }
    }
    out
}

/// An instruction whose constraints were stated at known turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    /// The query issued when the instruction is carried out.
    pub query: String,
    pub constraint_turn_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub per_instruction: BTreeMap<String, f64>,
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

/// Mean over instructions of the share of constraint turns retrieved.
/// Instructions without constraints are skipped.
pub fn constraint_recall(instructions: &[Instruction], retrieved: &BTreeMap<String, BTreeSet<String>>) -> RecallReport {
    let empty = BTreeSet::new();
    let mut out = RecallReport::default();
    for ins in instructions {
        if ins.constraint_turn_ids.is_empty() {
            out.skipped.push(ins.id.clone());
            continue;
        }
        let got = retrieved.get(&ins.id).unwrap_or(&empty);
        let hit = ins.constraint_turn_ids.intersection(got).count();
        out.per_instruction.insert(ins.id.clone(), 100.0 * hit as f64 / ins.constraint_turn_ids.len() as f64);
    }
    if !out.per_instruction.is_empty() {
        out.mean = Some(out.per_instruction.values().sum::<f64>() / out.per_instruction.len() as f64);
    }
    out
}

/// Cumulative offline time against cumulative offline tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySeries {
    /// `(iteration, cumulative tokens, cumulative microseconds)`.
    pub points: Vec<(u64, u64, u64)>,
    /// Least-squares slope in microseconds per token.
    pub slope_us_per_token: Option<f64>,
    pub r_squared: Option<f64>,
}

pub fn offline_complexity(records: &[IterationRecord]) -> ComplexitySeries {
    let mut tokens = 0u64;
    let mut us = 0u64;
    let mut points = Vec::with_capacity(records.len());
    for r in records {
        tokens += r.offline_tokens as u64;
        us += r.offline_latency_us;
        points.push((r.iteration, tokens, us));
    }
    let (slope, r2) = fit(&points);
    ComplexitySeries { points, slope_us_per_token: slope, r_squared: r2 }
}

fn fit(points: &[(u64, u64, u64)]) -> (Option<f64>, Option<f64>) {
    let n = points.len() as f64;
    if points.len() < 2 {
        return (None, None);
    }
    let mx = points.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.2 as f64).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.1 as f64 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.1 as f64 - mx) * (p.2 as f64 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.2 as f64 - my).powi(2)).sum();
    if sxx == 0.0 {
        return (None, None);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (Some(slope), Some(r2))
}

// ---------------------------------------------------------------------------
// Timeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub narrative_id: String,
    pub owner: String,
    /// Headline in the last snapshot.
    pub headline: String,
    /// First iteration whose snapshot contains the narrative.
    pub first_seen: u64,
    /// Fragments bound per iteration; absent iterations are zero.
    pub bound: BTreeMap<u64, usize>,
    /// Iterations where the narrative gained subplots.
    pub markers: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineExport {
    pub iterations: Vec<u64>,
    pub narratives: Vec<TimelineRow>,
}

/// Diffs consecutive snapshots: growth in a narrative's fragment count is
/// a binding, growth in its subplot count a consolidation marker.
pub fn export_timeline(snapshots: &[BankSnapshot]) -> Result<TimelineExport, MetricsError> {
    if snapshots.is_empty() {
        return Err(MetricsError::MissingSnapshots);
    }
    let mut snaps: Vec<&BankSnapshot> = snapshots.iter().collect();
    snaps.sort_by_key(|s| s.iteration);
    let mut rows: BTreeMap<String, TimelineRow> = BTreeMap::new();
    let mut prev: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in &snaps {
        for n in &s.bank.narratives {
            let row = rows.entry(n.narrative_id.clone()).or_insert_with(|| TimelineRow {
                narrative_id: n.narrative_id.clone(),
                owner: n.owner.clone(),
                headline: n.headline.clone(),
                first_seen: s.iteration,
                bound: BTreeMap::new(),
                markers: Vec::new(),
            });
            row.headline = n.headline.clone();
            let (f0, s0) = prev.get(&n.narrative_id).copied().unwrap_or((0, 0));
            let (f1, s1) = (n.fragments.len(), n.subplots.len());
            if f1 > f0 {
                row.bound.insert(s.iteration, f1 - f0);
            }
            if s1 > s0 {
                row.markers.push(s.iteration);
            }
            prev.insert(n.narrative_id.clone(), (f1, s1));
        }
    }
    Ok(TimelineExport { iterations: snaps.iter().map(|s| s.iteration).collect(), narratives: rows.into_values().collect() })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl TimelineExport {
    /// Long format: one row per narrative and iteration, starting where
    /// the narrative first appears.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("narrative_id,owner,headline,iteration,bound,subplot_marker\n");
        for row in &self.narratives {
            for &i in self.iterations.iter().filter(|&&i| i >= row.first_seen) {
                let bound = row.bound.get(&i).copied().unwrap_or(0);
                let marker = u8::from(row.markers.contains(&i));
                let _ = writeln!(
                    out,
                    "{},{},{},{i},{bound},{marker}",
                    row.narrative_id,
                    csv_field(&row.owner),
                    csv_field(&row.headline)
                );
            }
        }
        out
    }
}
