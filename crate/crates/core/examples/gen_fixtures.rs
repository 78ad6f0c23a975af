//! Regenerates the bundled fixtures under `crates/core/fixtures`.
//!
//! ```text
//! cargo run -p workmem --example gen_fixtures
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use workmem::eval::EvalOptions;
use workmem::orchestrator::{replay_to_dir, ConsolidationPolicy, EngineConfig};
use workmem::reasoner::{ScriptTable, ScriptedBackend};
use workmem::rundir::digest_tree;
use workmem::retrieval::RetrieverKind;
use workmem::sim::{self, FixtureRun, GenSpec};
use workmem::transcript::Transcript;

fn write(dir: &Path, name: &str, t: &Transcript, runs: &[FixtureRun], board: &sim::Storyboard) {
    let mut native = t.to_native_json();
    native.push('\n');
    fs::write(dir.join(format!("{name}.json")), native).expect("write transcript");
    let table = sim::record_script(t, board, runs).expect("fixture runs succeed");
    table.save(dir.join(format!("{name}.script.json"))).expect("write script");
    println!("{name}: {} turns, {} questions, {} script entries", t.turn_count(), t.questions.len(), table.len());
}

/// Digests of a scripted run directory, compared by the acceptance suite to
/// catch platform-dependent output.
fn write_digests(dir: &Path, name: &str, t: &Transcript, config: &EngineConfig) {
    let table = ScriptTable::load(dir.join(format!("{name}.script.json"))).expect("script loads");
    let run = tempfile::tempdir().expect("temp dir");
    let desc = serde_json::json!({"kind": "scripted", "script": format!("{name}.script.json")});
    replay_to_dir(t, config, Arc::new(ScriptedBackend::new(table)), desc, run.path()).expect("scripted replay");
    let digests = digest_tree(run.path()).expect("digest run");
    let mut out = serde_json::to_string_pretty(&digests).expect("digests serialize");
    out.push('\n');
    fs::write(dir.join(format!("{name}.digests.json")), out).expect("write digests");
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir).expect("fixtures dir");

    let (t, board) = sim::generate(7, GenSpec::bundled());
    let base = EngineConfig::default();
    let embedding_eval = EvalOptions { retriever: Some(RetrieverKind::Embedding), ..EvalOptions::default() };
    let runs = vec![
        FixtureRun {
            engine: base.clone(),
            evals: vec![EvalOptions::default(), embedding_eval.clone()],
            queries: t
                .questions
                .iter()
                .take(3)
                .flat_map(|q| [1, 2, 4].map(|k| (q.text.clone(), k, RetrieverKind::Coherence)))
                .collect(),
        },
        FixtureRun::replay_only(EngineConfig { b: 0, ..base.clone() }),
        FixtureRun::replay_only(EngineConfig { consolidation_policy: ConsolidationPolicy::None, ..base.clone() }),
        FixtureRun::replay_only(EngineConfig { consolidation_policy: ConsolidationPolicy::Rapid { step: 3 }, ..base.clone() }),
        FixtureRun::replay_only(EngineConfig { retriever: RetrieverKind::Embedding, ..base.clone() }),
    ];
    write(&dir, "synthetic60", &t, &runs, &board);
    write_digests(&dir, "synthetic60", &t, &base);

    let (t, board) = sim::contrast();
    let queries = t
        .questions
        .iter()
        .flat_map(|q| {
            [1, 2].into_iter().flat_map(move |k| {
                [RetrieverKind::Coherence, RetrieverKind::Embedding].map(|r| (q.text.clone(), k, r))
            })
        })
        .collect();
    let runs = vec![FixtureRun {
        engine: sim::contrast_config(),
        evals: vec![EvalOptions::default(), embedding_eval],
        queries,
    }];
    write(&dir, "contrast", &t, &runs, &board);
}
