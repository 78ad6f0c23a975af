//! Config files and flag merging.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! individual flags. A run directory's `config.json` is itself a valid
//! `--config` file, so any run can be repeated from its own directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use workmem::orchestrator::{ConsolidationPolicy, EngineConfig};
use workmem::reasoner::{Backend, ClockMode, LiveBackend, LiveConfig, ScriptTable, ScriptedBackend};
use workmem::retrieval::RetrieverKind;

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Scripted { script: PathBuf },
    Live(LiveConfig),
}

/// Contents of a `--config` file. Unknown top-level keys (such as the
/// `version` and `scenario_id` of a run's config.json) are ignored.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub backend: Option<BackendSpec>,
    #[serde(skip)]
    pub dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let raw = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            serde_json::from_str(&raw).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        cfg.dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, Failure> {
        path.map(Self::load).transpose().map(Option::unwrap_or_default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Live,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ClockFlag {
    Wall,
    Simulated,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct EngineFlags {
    /// Full-history exchanges before memory takes over [default: 20]
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Narratives (and facts) retrieved per turn [default: 2]
    #[arg(long)]
    pub k: Option<usize>,
    /// Consolidation window in fragments [default: 10]
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Extra full-history exchanges in buffer mode, 0 disables [default: 4]
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// inactive, rapid:<step> or none [default: inactive]
    #[arg(long)]
    pub policy: Option<ConsolidationPolicy>,
    /// coherence or embedding [default: coherence]
    #[arg(long)]
    pub retriever: Option<RetrieverKind>,
    /// Recent turns shown to the binding prompt [default: 4]
    #[arg(long)]
    pub binding_context: Option<usize>,
    /// Latency clock; simulated is deterministic [default: simulated]
    #[arg(long, value_enum)]
    pub clock: Option<ClockFlag>,
    /// Attach semantic facts to coherence retrieval [default: true]
    #[arg(long)]
    pub semantic_retrieval: Option<bool>,
}

impl EngineFlags {
    pub fn apply(&self, mut cfg: EngineConfig) -> Result<EngineConfig, Failure> {
        if let Some(v) = self.t {
            cfg.t = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.b {
            cfg.b = v;
        }
        if let Some(v) = self.policy {
            cfg.consolidation_policy = v;
        }
        if let Some(v) = self.retriever {
            cfg.retriever = v;
        }
        if let Some(v) = self.binding_context {
            cfg.binding_context_turns = v;
        }
        match self.clock {
            Some(ClockFlag::Wall) => cfg.clock = ClockMode::Wall,
            Some(ClockFlag::Simulated) if cfg.clock == ClockMode::Wall => cfg.clock = ClockMode::simulated_default(),
            _ => {}
        }
        if let Some(v) = self.semantic_retrieval {
            cfg.semantic_retrieval = v;
        }
        cfg.validate().map_err(Failure::input)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct BackendFlags {
    /// Reasoning backend; inferred from --script or --endpoint when omitted
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Chat-completions URL for the live backend
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name for the live backend
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API token [default: WORKMEM_API_KEY]
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Script table for the scripted backend
    #[arg(long)]
    pub script: Option<PathBuf>,
}

impl BackendFlags {
    pub fn resolve(&self, base: Option<BackendSpec>) -> Result<BackendSpec, Failure> {
        let kind = self.backend.or_else(|| {
            if self.script.is_some() {
                Some(BackendKind::Scripted)
            } else if self.endpoint.is_some() || self.model.is_some() {
                Some(BackendKind::Live)
            } else {
                None
            }
        });
        let spec = match (kind, base) {
            (None, Some(b)) => b,
            (None, None) => return Err(Failure::input("no backend configured (use --backend, --script or --config)")),
            (Some(BackendKind::Scripted), base) => {
                let base_script = match base {
                    Some(BackendSpec::Scripted { script }) => Some(script),
                    _ => None,
                };
                let script = self
                    .script
                    .clone()
                    .or(base_script)
                    .ok_or_else(|| Failure::input("scripted backend needs --script"))?;
                BackendSpec::Scripted { script }
            }
            (Some(BackendKind::Live), base) => {
                let base = match base {
                    Some(BackendSpec::Live(c)) => Some(c),
                    _ => None,
                };
                let endpoint = self.endpoint.clone().or_else(|| base.as_ref().map(|c| c.endpoint.clone()));
                let model = self.model.clone().or_else(|| base.as_ref().map(|c| c.model.clone()));
                let (Some(endpoint), Some(model)) = (endpoint, model) else {
                    return Err(Failure::input("live backend needs --endpoint and --model"));
                };
                let mut c = base.unwrap_or_else(|| LiveConfig::new(endpoint.clone(), model.clone()));
                c.endpoint = endpoint;
                c.model = model;
                BackendSpec::Live(c)
            }
        };
        Ok(match (spec, &self.api_key_env) {
            (BackendSpec::Live(mut c), Some(var)) => {
                c.api_key_env = var.clone();
                BackendSpec::Live(c)
            }
            (s, _) => s,
        })
    }
}

/// Finds a script path as given, else next to the config file it came from.
fn locate(script: &Path, config_dir: Option<&Path>) -> PathBuf {
    if script.is_relative() && !script.exists() {
        if let Some(alt) = config_dir.map(|d| d.join(script)).filter(|p| p.exists()) {
            return alt;
        }
    }
    script.to_path_buf()
}

pub fn build_backend(spec: &BackendSpec, config_dir: Option<&Path>) -> Result<Arc<dyn Backend>, Failure> {
    match spec {
        BackendSpec::Scripted { script } => {
            let path = locate(script, config_dir);
            let table = ScriptTable::load(&path)
                .map_err(|e| Failure::input(format!("cannot load script table {}: {e}", path.display())))?;
            Ok(Arc::new(ScriptedBackend::new(table)))
        }
        BackendSpec::Live(c) => Ok(Arc::new(LiveBackend::new(c.clone()).map_err(|e| Failure::backend(e.to_string()))?)),
    }
}
