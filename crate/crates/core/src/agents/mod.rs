//! The three pipeline agents.

pub mod context;
pub mod reasoning;
pub mod validation;

pub use context::{parse_rerank_score, rerank, run_context_agent, vote_task_category, ContextError, Reranked};
pub use reasoning::{build_reasoning_prompt, parse_answer, run_reasoning_agent, ReasoningError, UnparseableAnswer};
pub use validation::{estimate_confidence, parse_confidence, revise, run_validation_agent, Confidence, ReviseError};
