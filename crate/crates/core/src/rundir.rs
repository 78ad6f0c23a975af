//! Run directory layout.
//!
//! ```text
//! <run>/config.json        engine + backend configuration
//! <run>/transcript.json    the replayed transcript, native format
//! <run>/records.jsonl      one IterationRecord per line
//! <run>/exchanges.jsonl    raw backend prompts and completions
//! <run>/snapshots/iter-000021.json
//! <run>/episodic.json      final bank snapshot
//! <run>/semantic.jsonl     final triple store log
//! ```
//!
//! Everything is written deterministically: keys in struct order, one
//! trailing newline, no wall-clock timestamps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episodic::{BankSnapshot, EpisodicBank, EpisodicError};
use crate::orchestrator::{EngineConfig, ExchangeLine, IterationRecord};
use crate::semantic::{SemanticError, TripleStore};
use crate::transcript::{parse_native_str, Transcript, TranscriptError};

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("run directory has no final memory bank ({0})")]
    MissingBank(PathBuf),
    #[error("run directory has no snapshots ({0})")]
    MissingSnapshots(PathBuf),
    #[error(transparent)]
    Episodic(#[from] EpisodicError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunDirError + '_ {
    move |source| RunDirError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub scenario_id: String,
    pub engine: EngineConfig,
    /// Free-form backend description supplied by the caller.
    pub backend: Value,
}

pub struct RunWriter {
    root: PathBuf,
    records: BufWriter<File>,
    exchanges: BufWriter<File>,
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serializes")
}

fn write_pretty<T: Serialize>(path: &Path, v: &T) -> Result<(), RunDirError> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

impl RunWriter {
    /// Creates (or resets) a run directory.
    pub fn create(root: impl AsRef<Path>, config: &RunConfig, transcript: &Transcript) -> Result<Self, RunDirError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let snaps = root.join("snapshots");
        if snaps.exists() {
            fs::remove_dir_all(&snaps).map_err(io_err(&snaps))?;
        }
        fs::create_dir_all(&snaps).map_err(io_err(&snaps))?;
        for stale in ["episodic.json", "semantic.jsonl", "report.json"] {
            let p = root.join(stale);
            if p.exists() {
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
        write_pretty(&root.join("config.json"), config)?;
        let tpath = root.join("transcript.json");
        let mut t = transcript.to_native_json();
        t.push('\n');
        fs::write(&tpath, t).map_err(io_err(&tpath))?;
        let open = |name: &str| -> Result<BufWriter<File>, RunDirError> {
            let p = root.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
        };
        Ok(Self { records: open("records.jsonl")?, exchanges: open("exchanges.jsonl")?, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record(&mut self, r: &IterationRecord) -> Result<(), RunDirError> {
        writeln!(self.records, "{}", json_line(r)).map_err(io_err(&self.root))
    }

    pub fn exchanges(&mut self, lines: &[ExchangeLine]) -> Result<(), RunDirError> {
        for l in lines {
            writeln!(self.exchanges, "{}", json_line(l)).map_err(io_err(&self.root))?;
        }
        Ok(())
    }

    pub fn snapshot(&mut self, s: &BankSnapshot) -> Result<(), RunDirError> {
        let p = snapshot_path(&self.root, s.iteration);
        fs::write(&p, s.to_json()).map_err(io_err(&p))
    }

    pub fn finish(mut self, bank: &EpisodicBank, store: &TripleStore, at: Option<chrono::NaiveDateTime>) -> Result<(), RunDirError> {
        self.records.flush().map_err(io_err(&self.root))?;
        self.exchanges.flush().map_err(io_err(&self.root))?;
        let p = self.root.join("episodic.json");
        fs::write(&p, bank.snapshot(at).to_json()).map_err(io_err(&p))?;
        store.write_jsonl(self.root.join("semantic.jsonl"))?;
        Ok(())
    }
}

pub fn snapshot_path(root: &Path, iteration: u64) -> PathBuf {
    root.join("snapshots").join(format!("iter-{iteration:06}.json"))
}

/// Read-side view of a finished (or aborted) run.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RunDirError> {
        let root = root.as_ref().to_path_buf();
        if !root.join("config.json").exists() {
            return Err(RunDirError::Format { path: root, message: "not a run directory (config.json missing)".into() });
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> Result<RunConfig, RunDirError> {
        let p = self.root.join("config.json");
        let raw = fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&raw).map_err(|e| RunDirError::Format { path: p, message: e.to_string() })
    }

    pub fn transcript(&self) -> Result<Transcript, RunDirError> {
        let p = self.root.join("transcript.json");
        let raw = fs::read_to_string(&p).map_err(io_err(&p))?;
        Ok(parse_native_str(&raw)?)
    }

    pub fn records(&self) -> Result<Vec<IterationRecord>, RunDirError> {
        read_jsonl(&self.root.join("records.jsonl"))
    }

    pub fn exchanges(&self) -> Result<Vec<ExchangeLine>, RunDirError> {
        read_jsonl(&self.root.join("exchanges.jsonl"))
    }

    pub fn bank(&self) -> Result<EpisodicBank, RunDirError> {
        let p = self.root.join("episodic.json");
        if !p.exists() {
            return Err(RunDirError::MissingBank(self.root.clone()));
        }
        let raw = fs::read_to_string(&p).map_err(io_err(&p))?;
        Ok(BankSnapshot::restore(&raw)?)
    }

    pub fn store(&self) -> Result<TripleStore, RunDirError> {
        let p = self.root.join("semantic.jsonl");
        if !p.exists() {
            return Err(RunDirError::MissingBank(self.root.clone()));
        }
        Ok(TripleStore::load_jsonl(p)?)
    }

    /// All snapshots in iteration order.
    pub fn snapshots(&self) -> Result<Vec<BankSnapshot>, RunDirError> {
        let dir = self.root.join("snapshots");
        let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect(),
            Err(_) => Vec::new(),
        };
        if paths.is_empty() {
            return Err(RunDirError::MissingSnapshots(dir));
        }
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let raw = fs::read_to_string(p).map_err(io_err(p))?;
                Ok(BankSnapshot::from_json(&raw)?)
            })
            .collect()
    }
}

/// sha256 of every file under `root`, keyed by `/`-separated relative path.
pub fn digest_tree(root: impl AsRef<Path>) -> Result<BTreeMap<String, String>, RunDirError> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), RunDirError> {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let rel = path.strip_prefix(base).unwrap_or(&path);
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, hex::encode(Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }
    let root = root.as_ref();
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunDirError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RunDirError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
