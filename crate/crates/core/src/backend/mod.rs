//! Model backends: a uniform request shape for generative and embedding
//! models, retry handling, an OpenAI-compatible HTTP client and scripted
//! mocks for deterministic runs.

mod http;
mod mock;
mod retry;

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ImageRef;

pub use http::{build_chat_body, build_embedding_body, parse_chat_response, parse_embedding_response, HttpBackend, HttpSettings, API_KEY_ENV};
pub use mock::{FaultInjector, FnBackend, HashEmbedder, MockReply, MockScript, ScriptedBackend, ScriptedError};
pub use retry::{call_with_retry, RetryPolicy};

/// The agent role issuing a generation request. Mock scripts and model
/// routing are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Rerank,
    Reasoning,
    Confidence,
    Revision,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Rerank => "rerank",
            Role::Reasoning => "reasoning",
            Role::Confidence => "confidence",
            Role::Revision => "revision",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptPart {
    Text { text: String },
    Image { image: ImageRef },
}

impl PromptPart {
    pub fn text(s: impl Into<String>) -> Self {
        PromptPart::Text { text: s.into() }
    }

    pub fn image(image: ImageRef) -> Self {
        PromptPart::Image { image }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            PromptPart::Text { text } => Some(text),
            PromptPart::Image { .. } => None,
        }
    }
}

/// Concatenation of the text parts, newline separated. This is what mocks
/// match on and what traces record as the rendered prompt.
pub fn joined_text(parts: &[PromptPart]) -> String {
    parts.iter().filter_map(PromptPart::as_text).collect::<Vec<_>>().join("\n")
}

/// Whitespace-normalized SHA-256 of `text`, hex encoded.
pub fn prompt_digest(text: &str) -> String {
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
    hex::encode(Sha256::digest(normalized.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { max_tokens: 512, temperature: 0.0, stop: None }
    }
}

impl GenParams {
    pub fn with_max_tokens(max_tokens: u32) -> Self {
        Self { max_tokens, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    pub role: Role,
    pub parts: Vec<PromptPart>,
    pub params: GenParams,
    /// 1-based transport attempt number.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("image unreadable: {}", .0.display())]
    ImageUnreadable(PathBuf),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<BackendError> },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited { .. })
    }
}

/// A text or multimodal generative model.
pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f32>>, BackendError>;
}

impl<T: Generator + ?Sized> Generator for std::sync::Arc<T> {
    fn generate(&self, req: &GenRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f32>>, BackendError> {
        (**self).embed(req)
    }
}

/// Result of a retried call together with the number of attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct CallOutcome<T> {
    pub result: Result<T, BackendError>,
    pub attempts: u32,
}

/// Single-prompt text completion with retries.
pub fn complete_text(
    backend: &dyn Generator,
    role: Role,
    prompt: &str,
    params: &GenParams,
    retry: &RetryPolicy,
) -> CallOutcome<String> {
    if prompt.trim().is_empty() {
        return CallOutcome { result: Err(BackendError::InvalidRequest("empty prompt".into())), attempts: 0 };
    }
    complete_multimodal(backend, role, &[PromptPart::text(prompt)], params, retry)
}

/// Completion over an ordered list of text and image parts, with retries.
pub fn complete_multimodal(
    backend: &dyn Generator,
    role: Role,
    parts: &[PromptPart],
    params: &GenParams,
    retry: &RetryPolicy,
) -> CallOutcome<String> {
    if !parts.iter().any(|p| p.as_text().is_some_and(|t| !t.trim().is_empty())) {
        return CallOutcome {
            result: Err(BackendError::InvalidRequest("at least one non-empty text part required".into())),
            attempts: 0,
        };
    }
    let mut req = GenRequest { role, parts: parts.to_vec(), params: params.clone(), attempt: 0 };
    call_with_retry(retry, |attempt| {
        req.attempt = attempt;
        backend.generate(&req)
    })
}

/// Batch embedding with retries; rejects ragged or miscounted responses.
pub fn embed(backend: &dyn Embedder, texts: &[String], retry: &RetryPolicy) -> CallOutcome<Vec<Vec<f32>>> {
    if texts.is_empty() {
        return CallOutcome { result: Err(BackendError::InvalidRequest("no texts to embed".into())), attempts: 0 };
    }
    let mut req = EmbedRequest { texts: texts.to_vec(), attempt: 0 };
    let outcome = call_with_retry(retry, |attempt| {
        req.attempt = attempt;
        backend.embed(&req)
    });
    let result = outcome.result.and_then(|vectors| {
        if vectors.len() != texts.len() {
            return Err(BackendError::Protocol(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        check_uniform_dim(&vectors)?;
        Ok(vectors)
    });
    CallOutcome { result, attempts: outcome.attempts }
}

pub(crate) fn check_uniform_dim(vectors: &[Vec<f32>]) -> Result<(), BackendError> {
    if let Some(first) = vectors.first() {
        let expected = first.len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != expected) {
            return Err(BackendError::DimensionMismatch { expected, got: bad.len() });
        }
    }
    Ok(())
}
