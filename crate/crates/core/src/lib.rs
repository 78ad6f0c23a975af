//! Working-memory engine for long-running agent conversations.
//!
//! Conversations are replayed turn by turn. Early turns are answered from the
//! full history; once the history passes a threshold the engine answers from
//! memory it builds in the background: episodic narratives (plot headline,
//! subplots, timestamped fragments) and a semantic triple store.

pub mod episodic;
pub mod eval;
pub mod metrics;
pub mod reasoner;
pub mod orchestrator;
pub mod render;
pub mod retrieval;
pub mod rundir;
pub mod semantic;
pub mod sim;
pub mod transcript;
