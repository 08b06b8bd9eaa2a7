//! agenttune: an LLM-agent auto-tuning framework for storage-system
//! configurations.
//!
//! The framework is organized around four agents that cooperate in two
//! iterative cycles. Cycle A proposes configuration candidates, benchmarks
//! them in a sandbox, and distills each run into a performance digest.
//! Cycle B turns the accumulated tuning experience into scored insights
//! kept in a layered short-term/long-term memory, which in turn guide the
//! next round of proposals.
//!
//! Module map:
//! - [`target`]: tunable-system abstraction (schemas, configs, validation,
//!   the built-in SimKV simulated target, external-process adapters)
//! - [`llm`]: gateway to language-model backends with token accounting
//! - [`sandbox`]: the Executor agent (isolated benchmark runs, monitoring)
//! - [`extract`]: the Extractor agent (declarative metric extraction,
//!   self-correction, fixed-parser fallback, digests)
//! - [`search`]: the Searcher agent (tree search, validation layers,
//!   node selection, termination)
//! - [`memory`]: the Reflector agent (insights, confidence voting,
//!   confidence-weighted retrieval)
//! - [`session`]: the orchestrator driving both cycles plus the
//!   MPG/TC95/TE/TWER report

pub mod extract;
pub mod llm;
pub mod memory;
pub mod prompts;
pub mod sandbox;
pub mod search;
pub mod session;
pub mod target;

pub use session::{
    resume_session, run_session, SessionConfig, SessionError, SessionReport,
};
