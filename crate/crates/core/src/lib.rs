//! Harness for comparing natural-language and structured "thought formats"
//! in single-LLM reasoning and two-agent communication.
//!
//! The crate is organised by concern:
//!
//! * [`backend`]: chat-completion backends (HTTP, scripted, replay) and token counting.
//! * [`datasets`]: benchmark ingestion and context-splitting preprocessing.
//! * [`prompting`]: the prompt template catalog and prompt builders.
//! * [`reasoning`]: single-LLM strategy execution, answer extraction, accuracy.
//! * [`dialogue`]: the turn-taking conversation engine.
//! * [`acl`]: KQML-style message codec and its JSON bridge.
//! * [`metrics`]: RougeL, token deltas, run aggregation, format classification.

pub mod acl;
pub mod backend;
pub mod datasets;
pub mod dialogue;
pub mod metrics;
pub mod prompting;
pub mod reasoning;

pub use backend::{BackendConfig, BackendKind, ChatBackend, ChatRequest, ChatResponse, Role};
pub use datasets::{AnswerSpec, ContextShare, TaskInstance, TaskKind, TaskSet};
pub use dialogue::{DialogueTranscript, Termination, TerminationPolicy, Turn};
pub use prompting::{FormatLabel, PromptCatalog, Strategy, StrategyConfig};
pub use reasoning::{AccuracyReport, FormatNote, ReasoningTrace};
