//! Multi-agent retrieval-augmented pipeline for multiple-choice radiology
//! visual question answering.
//!
//! Three agents run in sequence per question: a context agent retrieves
//! similar solved questions from a bank, reranks them with an LLM and votes
//! on the task and category; a reasoning agent answers from the question,
//! images and retrieved context; a validation agent asks for a confidence
//! score and re-answers when it does not exceed a threshold. Model access
//! goes through the [`backend`] traits, so the same pipeline runs against an
//! HTTP service or a deterministic script.

pub mod agents;
pub mod backend;
pub mod config;
pub mod datasets;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod retrieval;
pub mod templates;
pub mod trace;

pub use model::{
    validate_example, AnswerLetter, ContextBundle, ImageRef, McqExample, MediaKind, Mode, PipelineConfig,
    PipelineTrace, Prediction, RawRecord, RetrievalCandidate, StageRecord,
};
