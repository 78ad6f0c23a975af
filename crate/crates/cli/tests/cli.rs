use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use workmem::rundir::{digest_tree, RunDir};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn workmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_workmem")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_synthetic(out: &Path, extra: &[&str]) -> Output {
    let t = fixture("synthetic60.json");
    let s = fixture("synthetic60.script.json");
    let mut args = vec!["run", "--transcript", t.to_str().unwrap(), "--backend", "scripted", "--script", s.to_str().unwrap()];
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    args.extend_from_slice(extra);
    workmem(&args)
}

fn run_contrast(out: &Path) -> Output {
    let t = fixture("contrast.json");
    let s = fixture("contrast.script.json");
    workmem(&[
        "run", "--transcript", t.to_str().unwrap(), "--script", s.to_str().unwrap(),
        "--T", "4", "--B", "0", "--policy", "none", "--out", out.to_str().unwrap(),
    ])
}

fn subplots(run: &Path) -> usize {
    RunDir::open(run).unwrap().bank().unwrap().narratives.iter().map(|n| n.subplots.len()).sum()
}

fn query_json(run: &Path, question: &str, extra: &[&str]) -> Value {
    let mut args = vec!["query", "--run", run.to_str().unwrap(), "--question", question, "--json"];
    args.extend_from_slice(extra);
    let o = workmem(&args);
    assert!(o.status.success(), "query failed: {}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

fn questions(name: &str) -> Vec<String> {
    let t: Value = serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap();
    t["questions"].as_array().unwrap().iter().map(|q| q["text"].as_str().unwrap().to_string()).collect()
}

#[test]
fn scripted_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = run_synthetic(&a, &[]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(stdout(&oa).contains("60 iterations, 7 narratives"), "{}", stdout(&oa));
    assert!(run_synthetic(&b, &[]).status.success());
    assert_eq!(digest_tree(&a).unwrap(), digest_tree(&b).unwrap());
}

#[test]
fn config_json_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_synthetic(&a, &["--B", "0"]).status.success());
    let o = workmem(&[
        "run",
        "--config", a.join("config.json").to_str().unwrap(),
        "--transcript", a.join("transcript.json").to_str().unwrap(),
        "--out", b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(digest_tree(&a).unwrap(), digest_tree(&b).unwrap());
}

#[test]
fn policy_none_builds_no_subplots() {
    let dir = tempfile::tempdir().unwrap();
    let (none, inactive) = (dir.path().join("none"), dir.path().join("inactive"));
    assert!(run_synthetic(&none, &["--policy", "none"]).status.success());
    assert!(run_synthetic(&inactive, &["--policy", "inactive"]).status.success());
    assert_eq!(subplots(&none), 0);
    assert!(subplots(&inactive) > 0);
}

#[test]
fn script_miss_names_the_prompt_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("miss");
    let t = fixture("synthetic60.json");
    let s = fixture("contrast.script.json");
    let o = workmem(&["run", "--transcript", t.to_str().unwrap(), "--script", s.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no script entry for answer prompt"), "{}", stderr(&o));
    assert!(stdout(&o).contains("run aborted: 1 iterations"));
    // the partial run is still readable
    assert_eq!(RunDir::open(&out).unwrap().records().unwrap().len(), 1);
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = workmem(&["run", "--transcript", "/nonexistent.json", "--script", "s.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let t = fixture("synthetic60.json");
    let o = workmem(&["run", "--transcript", t.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no backend configured"));
    let o = workmem(&["query", "--run", dir.path().to_str().unwrap(), "--question", "q"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn query_respects_k() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert!(run_synthetic(&run, &[]).status.success());
    let q = &questions("synthetic60.json")[0];
    for k in ["1", "2", "4"] {
        let trace = query_json(&run, q, &["--k", k]);
        let n = trace["retrieval"]["selections"].as_array().unwrap().len();
        assert!(n <= k.parse().unwrap(), "k={k}: {n} selections");
        assert!(trace["retrieval"]["semantic"].as_array().unwrap().len() <= k.parse().unwrap());
    }
    let o = workmem(&["query", "--run", run.to_str().unwrap(), "--question", q]);
    let text = stdout(&o);
    assert!(text.starts_with("answer: ") && text.contains("compression: "), "{text}");
}

#[test]
fn contrast_retrievers_disagree() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("contrast");
    let o = run_contrast(&run);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("6 narratives, 0 subplots, 0 facts"));
    for q in questions("contrast.json") {
        let coh = query_json(&run, &q, &["--k", "1", "--retriever", "coherence"]);
        let emb = query_json(&run, &q, &["--k", "1", "--retriever", "embedding"]);
        let top = |v: &Value| v["retrieval"]["selections"][0]["headline"].as_str().unwrap().to_string();
        assert_ne!(top(&coh), top(&emb), "{q}");
        // policy none leaves the semantic store empty
        assert!(coh["retrieval"]["semantic"].as_array().unwrap().is_empty());
    }
}

#[test]
fn eval_coverage_only() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert!(run_synthetic(&run, &[]).status.success());
    let o = workmem(&["eval", "--run", run.to_str().unwrap(), "--modes", "coverage"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let sections: Vec<&str> = ["coverage", "compression", "latency", "jscore", "recall"]
        .into_iter()
        .filter(|s| report.get(*s).is_some())
        .collect();
    assert_eq!(sections, vec!["coverage"]);
    let o = workmem(&["eval", "--run", run.to_str().unwrap(), "--modes", "coverage,speed"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_all_modes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert!(run_synthetic(&run, &[]).status.success());
    let out = dir.path().join("report.json");
    let o = workmem(&["eval", "--run", run.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("overall"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for s in ["coverage", "compression", "latency", "jscore", "recall"] {
        assert!(report.get(s).is_some_and(|v| !v.is_null()), "{s} missing");
    }
    assert!(report.get("errors").is_none());
    for section in ["online", "full_context", "offline"] {
        let p = &report["latency"][section];
        let xs: Vec<u64> = ["p50", "p90", "p95", "p99"].iter().map(|k| p[k].as_u64().unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] <= w[1]), "{section}: {xs:?}");
    }
}

#[test]
fn inspect_and_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert!(run_synthetic(&run, &[]).status.success());
    let o = workmem(&["inspect", "--run", run.to_str().unwrap(), "--narrative", "n001", "--facts"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("n001 ["), "{text}");
    assert!(text.contains("\nfacts (43):"));
    let o = workmem(&["inspect", "--run", run.to_str().unwrap(), "--iteration", "21"]);
    assert!(o.status.success());
    let o = workmem(&["inspect", "--run", run.to_str().unwrap(), "--narrative", "n999"]);
    assert_eq!(o.status.code(), Some(2));

    let csv = dir.path().join("timeline.csv");
    let o = workmem(&["export-timeline", "--run", run.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let body = std::fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("narrative_id,owner,headline,iteration,bound,subplot_marker"));
    // narratives appear at MemInit, never before
    assert!(lines.all(|l| l.split(',').rev().nth(2).unwrap().parse::<u64>().unwrap() >= 21));
}

#[test]
fn ingest_writes_native_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = workmem(&["ingest", "--transcript", fixture("contrast.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("3 sessions, 14 turns, 3 questions"), "{}", stdout(&o));
    let a: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&std::fs::read_to_string(fixture("contrast.json")).unwrap()).unwrap();
    assert_eq!(a, b);
}
