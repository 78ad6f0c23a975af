//! `workmem` command-line driver.
//!
//! Exit codes: 0 success, 2 input error, 3 backend error, 4 internal error.
//! Configuration precedence is defaults, then `--config`, then flags.

mod config;
mod inspect;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use tracing_subscriber::EnvFilter;
use workmem::eval::{evaluate_data, parse_modes, query, render_table, EvalOptions, Probe, RunData};
use workmem::metrics::{export_timeline, Instruction};
use workmem::orchestrator::{replay_to_dir, PathKind, ReplayError, RunArtifact};
use workmem::reasoner::ReasonerError;
use workmem::retrieval::RetrieverKind;
use workmem::rundir::{RunConfig, RunDir, RunDirError};
use workmem::transcript::{ingest, ingest_locomo_all, transcript_tokens, EvalQuestion, Transcript, WhitespaceCounter};

use config::{build_backend, BackendFlags, BackendSpec, EngineFlags, FileConfig};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(m: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: m.into() }
    }
    pub fn backend(m: impl Into<String>) -> Self {
        Self { code: EXIT_BACKEND, message: m.into() }
    }
    pub fn internal(m: impl Into<String>) -> Self {
        Self { code: EXIT_INTERNAL, message: m.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Errors opening an existing run are the caller's input.
fn open_failure(e: RunDirError) -> Failure {
    Failure::input(e.to_string())
}

fn reasoner_failure(e: &ReasonerError) -> u8 {
    match e {
        ReasonerError::MissingBinding(_) => EXIT_INTERNAL,
        _ => EXIT_BACKEND,
    }
}

#[derive(Parser)]
#[command(name = "workmem", version, about = "Working-memory engine: replay transcripts, probe and evaluate the resulting memory")]
#[command(after_help = "Settings are resolved as built-in defaults, then the --config file, then flags. \
A run directory's config.json is a valid --config file. API tokens are read from the environment only.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a LOCOMO or native transcript and write it in native form
    Ingest {
        #[arg(long)]
        transcript: PathBuf,
        /// Output file; a directory when the input holds several conversations
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a transcript through the engine into a run directory
    Run {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Ask one question against a finished run's memory
    Query {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        question: String,
        /// Selections to retrieve [default: the run's k]
        #[arg(long)]
        k: Option<usize>,
        /// Retriever [default: the run's retriever]
        #[arg(long)]
        retriever: Option<RetrieverKind>,
        /// Print the full trace as JSON
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Score a finished run and write report.json
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated subset of coverage,compression,latency,jscore,recall [default: all]
        #[arg(long)]
        modes: Option<String>,
        /// k for answering, judging and recall [default: the run's k]
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated k grid for coverage and compression
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
        ks: Vec<usize>,
        #[arg(long)]
        retriever: Option<RetrieverKind>,
        /// Leave unjudgeable answers out of the J-score denominator
        #[arg(long)]
        exclude_unjudgeable: bool,
        /// Concurrent judge calls
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        /// JSON array of questions replacing those in the run's transcript
        #[arg(long)]
        questions: Option<PathBuf>,
        /// JSON array of instructions for constraint recall
        #[arg(long)]
        instructions: Option<PathBuf>,
        /// Report path [default: <run>/report.json]
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Write per-iteration narrative growth from a run's snapshots
    ExportTimeline {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = TimelineFormat::Csv)]
        format: TimelineFormat,
        /// Output file [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the narrative trees of a run
    Inspect {
        #[arg(long)]
        run: PathBuf,
        /// Show the snapshot after this iteration instead of the final bank
        #[arg(long)]
        iteration: Option<u64>,
        #[arg(long)]
        narrative: Option<String>,
        /// Also list the semantic facts
        #[arg(long)]
        facts: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TimelineFormat {
    Csv,
    Json,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let raw = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| Failure::internal(format!("cannot write {}: {e}", path.display())))
}

fn describe(t: &Transcript) -> String {
    format!(
        "{}: {} sessions, {} turns, {} questions, {} tokens, speakers {}",
        t.scenario_id,
        t.sessions.len(),
        t.turn_count(),
        t.questions.len(),
        transcript_tokens(t, &WhitespaceCounter),
        t.speakers().join(", ")
    )
}

fn cmd_ingest(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let head: Value = read_json(path)?;
    let all = if head.is_array() {
        ingest_locomo_all(path).map_err(|e| Failure::input(e.to_string()))?
    } else {
        vec![ingest(path).map_err(|e| Failure::input(e.to_string()))?]
    };
    for t in &all {
        println!("{}", describe(t));
    }
    match (out, all.as_slice()) {
        (None, _) => {}
        (Some(o), [single]) => write_file(o, &(single.to_native_json() + "\n"))?,
        (Some(dir), many) => {
            std::fs::create_dir_all(dir).map_err(|e| Failure::internal(format!("{}: {e}", dir.display())))?;
            for t in many {
                write_file(&dir.join(format!("{}.json", t.scenario_id)), &(t.to_native_json() + "\n"))?;
            }
        }
    }
    Ok(())
}

fn summary(a: &RunArtifact) -> String {
    let bank = &a.memory.bank;
    let switch = a.records.iter().find(|r| r.path == PathKind::Memory).map(|r| r.iteration.to_string());
    format!(
        "{} iterations, {} narratives, {} subplots, {} facts, memory path from iteration {}",
        a.iterations,
        bank.narratives.len(),
        bank.narratives.iter().map(|n| n.subplots.len()).sum::<usize>(),
        a.memory.store.len(),
        switch.unwrap_or_else(|| "-".into())
    )
}

fn cmd_run(
    transcript: &Path,
    out: &Path,
    config: Option<&Path>,
    engine: &EngineFlags,
    backend: &BackendFlags,
) -> Result<(), Failure> {
    let file = FileConfig::load_opt(config)?;
    let t = ingest(transcript).map_err(|e| Failure::input(format!("{}: {e}", transcript.display())))?;
    let cfg = engine.apply(file.engine.clone())?;
    let spec = backend.resolve(file.backend.clone())?;
    let b = build_backend(&spec, file.dir.as_deref())?;
    let desc = serde_json::to_value(&spec).map_err(|e| Failure::internal(e.to_string()))?;
    match replay_to_dir(&t, &cfg, b, desc, out) {
        Ok(a) => {
            println!("run complete: {}; written to {}", summary(&a), out.display());
            let failed = a.records.iter().filter(|r| r.online_error.is_some() || !r.offline_errors.is_empty()).count();
            if failed > 0 {
                return Err(Failure::backend(format!(
                    "{failed} iterations had recoverable backend errors (see {})",
                    out.join("records.jsonl").display()
                )));
            }
            Ok(())
        }
        Err(ReplayError::Aborted { iteration, source, partial }) => {
            println!("run aborted: {}; partial run written to {}", summary(&partial), out.display());
            Err(Failure { code: reasoner_failure(&source), message: format!("aborted at iteration {iteration}: {source}") })
        }
        Err(ReplayError::RunDir(e)) => Err(Failure::internal(e.to_string())),
    }
}

fn run_backend(run: &RunDir, flags: &BackendFlags) -> Result<std::sync::Arc<dyn workmem::reasoner::Backend>, Failure> {
    let rc: RunConfig = run.config().map_err(open_failure)?;
    let base: Option<BackendSpec> = serde_json::from_value(rc.backend).ok();
    let spec = flags.resolve(base)?;
    build_backend(&spec, Some(run.root()))
}

fn cmd_query(
    run: &Path,
    question: &str,
    k: Option<usize>,
    retriever: Option<RetrieverKind>,
    json: bool,
    flags: &BackendFlags,
) -> Result<(), Failure> {
    let run = RunDir::open(run).map_err(open_failure)?;
    let rc = run.config().map_err(open_failure)?;
    let transcript = run.transcript().map_err(open_failure)?;
    let backend = run_backend(&run, flags)?;
    let probe = Probe::open(&run, backend).map_err(open_failure)?;
    let k = k.unwrap_or(rc.engine.k);
    if k == 0 {
        return Err(Failure::input("k must be at least 1"));
    }
    let kind = retriever.unwrap_or(rc.engine.retriever);
    let trace = query(&probe, &transcript, question, k, kind).map_err(|e| match &e {
        workmem::retrieval::RetrievalError::Reasoner(r) => Failure { code: reasoner_failure(r), message: e.to_string() },
        _ => Failure::backend(e.to_string()),
    })?;
    if json {
        println!("{}", serde_json::to_string_pretty(&trace).map_err(|e| Failure::internal(e.to_string()))?);
        return Ok(());
    }
    println!("answer: {}", trace.answer.trim());
    println!("retriever: {kind}, k = {k}");
    println!("selected:");
    for (i, s) in trace.retrieval.selections.iter().enumerate() {
        println!("  {}. [{}] {}", i + 1, s.leaf.owner, s.leaf.title());
    }
    if trace.retrieval.semantic.is_empty() {
        println!("facts: none");
    } else {
        println!("facts:");
        for f in &trace.retrieval.semantic {
            println!("  - {}", f.display());
        }
    }
    let ids: Vec<&str> = trace.retrieval.retrieved_turn_ids.iter().map(String::as_str).collect();
    println!("turns: {}", ids.join(", "));
    match trace.compression_rate {
        Some(c) => println!("compression: {c:.1}% ({} tokens retrieved)", trace.retrieval.retrieved_token_count),
        None => println!("compression: n/a"),
    }
    for w in &trace.retrieval.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    run: &Path,
    modes: Option<&str>,
    k: Option<usize>,
    ks: Vec<usize>,
    retriever: Option<RetrieverKind>,
    exclude_unjudgeable: bool,
    parallelism: usize,
    questions: Option<&Path>,
    instructions: Option<&Path>,
    out: Option<&Path>,
    flags: &BackendFlags,
) -> Result<(), Failure> {
    let dir = RunDir::open(run).map_err(open_failure)?;
    let mut data = RunData::load(&dir).map_err(|e| Failure::input(e.to_string()))?;
    if let Some(q) = questions {
        data.transcript.questions = read_json::<Vec<EvalQuestion>>(q)?;
    }
    let mut opts = EvalOptions {
        ks,
        k,
        retriever,
        exclude_unjudgeable,
        parallelism: parallelism.max(1),
        instructions: instructions.map(read_json::<Vec<Instruction>>).transpose()?,
        ..EvalOptions::default()
    };
    if let Some(m) = modes {
        opts.modes = parse_modes(m).map_err(|e| Failure::input(e.to_string()))?;
    }
    let backend = run_backend(&dir, flags)?;
    let report = evaluate_data(&data, backend, &opts).map_err(|e| Failure::input(e.to_string()))?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.root().join("report.json"));
    let body = serde_json::to_string_pretty(&report).map_err(|e| Failure::internal(e.to_string()))? + "\n";
    write_file(&path, &body)?;
    print!("{}", render_table(&report));
    println!("report written to {}", path.display());
    if report.errors.is_empty() {
        return Ok(());
    }
    let failed: Vec<String> = report.errors.iter().map(|(m, e)| format!("{m}: {e}")).collect();
    let code = if data.records.is_err() || data.memory.is_err() { EXIT_INPUT } else { EXIT_BACKEND };
    Err(Failure { code, message: format!("{} mode(s) failed; {}", failed.len(), failed.join("; ")) })
}

fn cmd_export_timeline(run: &Path, format: TimelineFormat, out: Option<&Path>) -> Result<(), Failure> {
    let dir = RunDir::open(run).map_err(open_failure)?;
    let snaps = dir.snapshots().map_err(open_failure)?;
    let timeline = export_timeline(&snaps).map_err(|e| Failure::input(e.to_string()))?;
    let body = match format {
        TimelineFormat::Csv => timeline.to_csv(),
        TimelineFormat::Json => serde_json::to_string_pretty(&timeline).map_err(|e| Failure::internal(e.to_string()))? + "\n",
    };
    match out {
        Some(p) => write_file(p, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn cmd_inspect(run: &Path, iteration: Option<u64>, narrative: Option<&str>, facts: bool) -> Result<(), Failure> {
    let dir = RunDir::open(run).map_err(open_failure)?;
    let bank = match iteration {
        None => dir.bank().map_err(open_failure)?,
        Some(i) => {
            let snaps = dir.snapshots().map_err(open_failure)?;
            snaps
                .into_iter()
                .find(|s| s.iteration == i)
                .map(|s| s.bank)
                .ok_or_else(|| Failure::input(format!("no snapshot for iteration {i}")))?
        }
    };
    if let Some(id) = narrative.filter(|id| bank.get(id).is_none()) {
        return Err(Failure::input(format!("no narrative {id}")));
    }
    print!("{}", inspect::bank_tree(&bank, narrative));
    if facts {
        let store = dir.store().map_err(open_failure)?;
        println!("\nfacts ({}):", store.len());
        print!("{}", inspect::facts(&store));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest { transcript, out } => cmd_ingest(&transcript, out.as_deref()),
        Command::Run { transcript, out, config, engine, backend } => {
            cmd_run(&transcript, &out, config.as_deref(), &engine, &backend)
        }
        Command::Query { run, question, k, retriever, json, backend } => {
            cmd_query(&run, &question, k, retriever, json, &backend)
        }
        Command::Eval { run, modes, k, ks, retriever, exclude_unjudgeable, parallelism, questions, instructions, out, backend } => {
            cmd_eval(
                &run,
                modes.as_deref(),
                k,
                ks,
                retriever,
                exclude_unjudgeable,
                parallelism,
                questions.as_deref(),
                instructions.as_deref(),
                out.as_deref(),
                &backend,
            )
        }
        Command::ExportTimeline { run, format, out } => cmd_export_timeline(&run, format, out.as_deref()),
        Command::Inspect { run, iteration, narrative, facts } => cmd_inspect(&run, iteration, narrative.as_deref(), facts),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
