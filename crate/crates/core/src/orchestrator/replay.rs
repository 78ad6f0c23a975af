//! Transcript replay driver.

use thiserror::Error;
use tracing::info;

use super::{Engine, IterationRecord, MemoryState, OfflineOutcome};
use crate::reasoner::ReasonerError;
use crate::rundir::{RunDirError, RunWriter};
use crate::transcript::Transcript;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: u64,
        #[source]
        source: ReasonerError,
        /// Whatever was produced before the failure.
        partial: Box<RunArtifact>,
    },
    #[error(transparent)]
    RunDir(#[from] RunDirError),
}

#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub records: Vec<IterationRecord>,
    pub memory: MemoryState,
    pub iterations: u64,
}

/// Replays every turn of `t`, waiting for each offline tick before the next
/// turn so the run is reproducible. Writes the run directory if `out` is
/// given; on an unrecoverable backend error the partial run is flushed
/// before returning.
pub fn run_replay(engine: &mut Engine, t: &Transcript, mut out: Option<RunWriter>) -> Result<RunArtifact, ReplayError> {
    let mut records = Vec::with_capacity(t.turn_count());
    let mut last_at = None;
    for q in t.replay() {
        let online = engine.step(q);
        let offline: Vec<OfflineOutcome> = engine.drain();
        let offline = offline.into_iter().next_back().expect("one offline outcome per step");
        let record = IterationRecord::merge(engine.iteration(), q, &online, &offline);
        if let Some(w) = out.as_mut() {
            w.record(&record)?;
            w.exchanges(&online.exchanges)?;
            w.exchanges(&offline.exchanges)?;
            w.snapshot(&offline.snapshot)?;
        }
        last_at = Some(q.timestamp);
        records.push(record);

        let fatal = online.error.filter(ReasonerError::is_fatal).or(offline.fatal);
        if let Some(source) = fatal {
            let partial = finish(engine, records, out, last_at)?;
            return Err(ReplayError::Aborted { iteration: engine.iteration(), source, partial: Box::new(partial) });
        }
    }
    let artifact = finish(engine, records, out, last_at)?;
    info!(iterations = artifact.iterations, narratives = artifact.memory.bank.narratives.len(), "replay finished");
    Ok(artifact)
}

fn finish(
    engine: &Engine,
    records: Vec<IterationRecord>,
    out: Option<RunWriter>,
    at: Option<chrono::NaiveDateTime>,
) -> Result<RunArtifact, ReplayError> {
    let memory = (*engine.memory()).clone();
    if let Some(w) = out {
        w.finish(&memory.bank, &memory.store, at)?;
    }
    Ok(RunArtifact { records, memory, iterations: engine.iteration() })
}

/// Replays `t` on a fresh engine into the run directory at `root`.
pub fn replay_to_dir(
    t: &Transcript,
    config: &super::EngineConfig,
    backend: std::sync::Arc<dyn crate::reasoner::Backend>,
    backend_desc: serde_json::Value,
    root: &std::path::Path,
) -> Result<RunArtifact, ReplayError> {
    let rc = crate::rundir::RunConfig {
        version: crate::rundir::RUN_FORMAT_VERSION,
        scenario_id: t.scenario_id.clone(),
        engine: config.clone(),
        backend: backend_desc,
    };
    let writer = RunWriter::create(root, &rc, t)?;
    let mut engine = Engine::new(config.clone(), backend);
    run_replay(&mut engine, t, Some(writer))
}
