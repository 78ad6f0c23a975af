use std::collections::BTreeMap;
use std::sync::Arc;

use workmem::orchestrator::{
    replay_to_dir, run_replay, ConsolidationPolicy, Engine, EngineConfig, PathKind, Phase, ReplayError, Transition,
    Trigger,
};
use workmem::reasoner::{Backend, FnBackend, PromptKind, ReasonerError, ScriptTable, ScriptedBackend};
use workmem::rundir::RunDir;
use workmem::sim::{generate, GenSpec, SimulatedBackend, Storyboard};
use workmem::transcript::Transcript;

fn scenario(sessions: usize, turns: usize) -> (Transcript, Storyboard) {
    generate(11, GenSpec { sessions, turns_per_session: turns, questions: 0, ..GenSpec::bundled() })
}

fn sim(t: &Transcript, board: &Storyboard) -> Arc<dyn Backend> {
    Arc::new(SimulatedBackend::new(board.clone(), t))
}

#[test]
fn short_transcript_never_initializes_memory() {
    let (t, board) = scenario(1, 10);
    let mut engine = Engine::new(EngineConfig::default(), sim(&t, &board));
    let art = run_replay(&mut engine, &t, None).unwrap();
    assert_eq!(art.records.len(), 10);
    assert!(art.records.iter().all(|r| r.path == PathKind::FullContext && !r.mem_init));
    assert!(art.memory.bank.is_empty());
    assert_eq!(art.memory.store.len(), 0);
}

#[test]
fn path_follows_threshold_and_buffer() {
    let (t, board) = scenario(3, 10);
    let b0 = EngineConfig { b: 0, ..EngineConfig::default() };
    let mut engine = Engine::new(b0, sim(&t, &board));
    let art = run_replay(&mut engine, &t, None).unwrap();
    assert_eq!(art.records[4].path, PathKind::FullContext);
    let r21 = &art.records[20];
    assert_eq!(r21.path, PathKind::Memory);
    assert_eq!(r21.retrieval.as_ref().map(|r| r.k), Some(2));

    let mut engine = Engine::new(EngineConfig::default(), sim(&t, &board));
    let art = run_replay(&mut engine, &t, None).unwrap();
    assert_eq!(art.records[22].path, PathKind::FullContext, "turn 23 is within T + B");
    assert_eq!(art.records[24].path, PathKind::Memory);
}

#[test]
fn history_grows_by_two_per_step() {
    let (t, board) = scenario(1, 6);
    let mut engine = Engine::new(EngineConfig::default(), sim(&t, &board));
    for (i, q) in t.replay().enumerate() {
        engine.step(q);
        let h = engine.history();
        assert_eq!(h.len(), 2 * (i + 1));
        assert_eq!(h[2 * i].turn_id, q.turn_id);
        assert_eq!(h[2 * i + 1].speaker, "assistant");
    }
    engine.drain();
}

#[test]
fn meminit_once_then_one_binding_per_turn() {
    let (t, board) = scenario(3, 10);
    let dir = tempfile::tempdir().unwrap();
    let cfg = EngineConfig { b: 0, ..EngineConfig::default() };
    let art = replay_to_dir(&t, &cfg, sim(&t, &board), serde_json::json!({"kind": "simulated"}), dir.path()).unwrap();
    let run = RunDir::open(dir.path()).unwrap();
    let records = run.records().unwrap();
    let inits: Vec<u64> = records.iter().filter(|r| r.mem_init).map(|r| r.iteration).collect();
    assert_eq!(inits, vec![21]);

    let mut per_kind: BTreeMap<PromptKind, Vec<u64>> = BTreeMap::new();
    for line in run.exchanges().unwrap().into_iter().filter(|l| l.phase == Phase::Offline) {
        per_kind.entry(line.exchange.kind).or_default().push(line.iteration);
    }
    assert_eq!(per_kind[&PromptKind::StoryInit], vec![21]);
    // the crossing turn is bound normally, after MemInit over turns 1..20
    assert_eq!(per_kind[&PromptKind::MemoryBinding], (21..=30).collect::<Vec<_>>());
    let init = run.exchanges().unwrap().into_iter().find(|l| l.exchange.kind == PromptKind::StoryInit).unwrap();
    assert!(init.exchange.prompt.contains("s2t10") && !init.exchange.prompt.contains("[s3t1]"));

    assert_eq!(run.snapshots().unwrap().len(), 30);
    assert_eq!(run.bank().unwrap(), art.memory.bank);
    assert_eq!(run.store().unwrap().facts(), art.memory.store.facts());
}

#[test]
fn inactive_edge_fires_once() {
    let (t, board) = scenario(4, 10);
    let mut engine = Engine::new(EngineConfig::default(), sim(&t, &board));
    let art = run_replay(&mut engine, &t, None).unwrap();
    let mut edges = 0;
    for r in &art.records {
        let went_inactive: Vec<&str> = r
            .transitions
            .iter()
            .filter(|e| e.transition == Transition::Inactive)
            .map(|e| e.narrative_id.as_str())
            .collect();
        for e in &r.consolidation_events {
            assert_eq!(e.trigger, Trigger::InactiveEdge);
            assert!(went_inactive.contains(&e.narrative_id.as_str()), "iteration {}", r.iteration);
        }
        edges += went_inactive.len();
        assert!(r.consolidation_events.len() <= went_inactive.len());
    }
    assert!(edges > 0);
    // a narrative stays inactive without further events until it is bound again
    let mut last: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &art.records {
        for e in &r.consolidation_events {
            if let Some(prev) = last.insert(e.narrative_id.as_str(), r.iteration) {
                let rebound = art.records.iter().any(|x| {
                    x.iteration > prev
                        && x.iteration < r.iteration
                        && x.transitions.iter().any(|t| t.narrative_id == e.narrative_id && t.transition == Transition::Reactivated)
                });
                assert!(rebound, "{} consolidated twice without reactivation", e.narrative_id);
            }
        }
    }
}

#[test]
fn policy_none_leaves_memory_flat() {
    let (t, board) = scenario(4, 10);
    let cfg = EngineConfig { consolidation_policy: ConsolidationPolicy::None, ..EngineConfig::default() };
    let mut engine = Engine::new(cfg, sim(&t, &board));
    let art = run_replay(&mut engine, &t, None).unwrap();
    assert!(art.memory.bank.narratives.iter().all(|n| n.subplots.is_empty()));
    assert_eq!(art.memory.store.len(), 0);
    assert!(art.records.iter().all(|r| r.consolidation_events.is_empty()));
}

#[test]
fn one_failed_consolidation_does_not_block_others() {
    let (t, board) = scenario(4, 10);
    let inner = SimulatedBackend::new(board, &t);
    let poisoned = std::sync::Mutex::new(None::<String>);
    let backend = FnBackend(move |req: &workmem::reasoner::PromptRequest| {
        if req.kind == PromptKind::Consolidation {
            let mut p = poisoned.lock().unwrap();
            let topic = req.binding("main_topic").to_string();
            if p.get_or_insert_with(|| topic.clone()) == &topic {
                return Ok("I could not find any structure here.".into());
            }
        }
        inner.complete(req)
    });
    let mut engine = Engine::new(EngineConfig::default(), Arc::new(backend));
    let art = run_replay(&mut engine, &t, None).unwrap();
    let events: Vec<_> = art.records.iter().flat_map(|r| &r.consolidation_events).collect();
    let failed: Vec<_> = events.iter().filter(|e| e.error.is_some()).collect();
    assert!(!failed.is_empty());
    assert!(events.iter().any(|e| e.error.is_none() && e.subplots_created > 0));
    assert!(failed.iter().all(|e| e.subplots_created == 0));
}

#[test]
fn online_failure_is_recorded_and_replay_continues() {
    let (t, board) = scenario(3, 10);
    let inner = SimulatedBackend::new(board, &t);
    let backend = FnBackend(move |req: &workmem::reasoner::PromptRequest| match req.kind {
        PromptKind::CoherenceRetrieve => Ok("no idea".into()),
        _ => inner.complete(req),
    });
    let cfg = EngineConfig { b: 0, ..EngineConfig::default() };
    let mut engine = Engine::new(cfg, Arc::new(backend));
    let art = run_replay(&mut engine, &t, None).unwrap();
    assert_eq!(art.records.len(), 30);
    // memory exists from iteration 22 on; MemInit lands after the response at 21
    let mem: Vec<_> = art.records.iter().filter(|r| r.path == PathKind::Memory && r.iteration > 21).collect();
    assert_eq!(mem.len(), 9);
    assert!(mem.iter().all(|r| r.warnings.iter().any(|w| w.starts_with("coherence choices"))));
    assert!(mem.iter().all(|r| r.retrieval.as_ref().is_some_and(|x| x.selected.is_empty())));
}

#[test]
fn fatal_backend_error_aborts_with_partial_run() {
    let (t, _) = scenario(1, 10);
    let dir = tempfile::tempdir().unwrap();
    let backend = Arc::new(ScriptedBackend::new(ScriptTable::new()));
    let err = replay_to_dir(&t, &EngineConfig::default(), backend, serde_json::json!({}), dir.path()).unwrap_err();
    let ReplayError::Aborted { iteration, source, partial } = err else { panic!("expected abort") };
    assert_eq!(iteration, 1);
    assert!(matches!(source, ReasonerError::ScriptMiss { kind: PromptKind::Answer, .. }));
    assert_eq!(partial.records.len(), 1);
    let run = RunDir::open(dir.path()).unwrap();
    assert_eq!(run.records().unwrap().len(), 1);
    assert!(run.bank().unwrap().is_empty());
}
