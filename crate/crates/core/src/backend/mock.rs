//! Deterministic stand-ins for model backends. Every reply is a pure
//! function of the request content, so runs are reproducible regardless of
//! how concurrent calls interleave.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{joined_text, prompt_digest, BackendError, EmbedRequest, Embedder, GenRequest, Generator, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedError {
    Transport,
    RateLimited,
    Protocol,
}

impl ScriptedError {
    fn to_error(self) -> BackendError {
        match self {
            ScriptedError::Transport => BackendError::Transport("scripted transport failure".into()),
            ScriptedError::RateLimited => BackendError::RateLimited { retry_after: None },
            ScriptedError::Protocol => BackendError::Protocol("scripted protocol failure".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Text(String),
    Error(ScriptedError),
}

impl MockReply {
    fn resolve(&self) -> Result<String, BackendError> {
        match self {
            MockReply::Text(t) => Ok(t.clone()),
            MockReply::Error(e) => Err(e.to_error()),
        }
    }
}

/// One rule of a mock script file. Exactly one of `exact`/`regex` and one of
/// `reply`/`error` must be set. A missing `role` matches every role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedError>,
}

/// On-disk mock script: `{"rules": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<ScriptRule>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("reading mock script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidRequest(format!("parsing mock script {}: {e}", path.display())))
    }
}

/// A generator whose replies are looked up by `(role, normalized prompt
/// digest)`, falling back to ordered regex rules. A prompt matching nothing
/// is an error, never a default reply.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    exact: HashMap<(Option<Role>, String), MockReply>,
    patterns: Vec<(Option<Role>, Regex, MockReply)>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_script(script: &MockScript) -> Result<Self, BackendError> {
        let mut backend = Self::new();
        for (i, rule) in script.rules.iter().enumerate() {
            let reply = match (&rule.reply, rule.error) {
                (Some(text), None) => MockReply::Text(text.clone()),
                (None, Some(err)) => MockReply::Error(err),
                _ => {
                    return Err(BackendError::InvalidRequest(format!(
                        "mock rule {i}: exactly one of `reply` and `error` required"
                    )))
                }
            };
            match (&rule.exact, &rule.regex) {
                (Some(prompt), None) => {
                    backend.exact.insert((rule.role, prompt_digest(prompt)), reply);
                }
                (None, Some(pattern)) => {
                    let re = Regex::new(pattern)
                        .map_err(|e| BackendError::InvalidRequest(format!("mock rule {i}: {e}")))?;
                    backend.patterns.push((rule.role, re, reply));
                }
                _ => {
                    return Err(BackendError::InvalidRequest(format!(
                        "mock rule {i}: exactly one of `exact` and `regex` required"
                    )))
                }
            }
        }
        Ok(backend)
    }

    /// Exact reply for `prompt` under `role`.
    pub fn on(mut self, role: Role, prompt: &str, reply: impl Into<String>) -> Self {
        self.exact.insert((Some(role), prompt_digest(prompt)), MockReply::Text(reply.into()));
        self
    }

    /// Regex fallback for `role` (or every role when `None`). Rules are tried
    /// in insertion order.
    pub fn on_regex(mut self, role: Option<Role>, pattern: &str, reply: impl Into<String>) -> Self {
        let re = Regex::new(pattern).expect("invalid mock regex");
        self.patterns.push((role, re, MockReply::Text(reply.into())));
        self
    }

    pub fn on_regex_error(mut self, role: Option<Role>, pattern: &str, error: ScriptedError) -> Self {
        let re = Regex::new(pattern).expect("invalid mock regex");
        self.patterns.push((role, re, MockReply::Error(error)));
        self
    }

    /// Number of `generate` calls served so far, including failures.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn lookup(&self, role: Role, text: &str) -> Option<&MockReply> {
        let digest = prompt_digest(text);
        self.exact
            .get(&(Some(role), digest.clone()))
            .or_else(|| self.exact.get(&(None, digest)))
            .or_else(|| {
                self.patterns
                    .iter()
                    .find(|(r, re, _)| r.is_none_or(|r| r == role) && re.is_match(text))
                    .map(|(_, _, reply)| reply)
            })
    }
}

impl Generator for ScriptedBackend {
    fn generate(&self, req: &GenRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = joined_text(&req.parts);
        match self.lookup(req.role, &text) {
            Some(reply) => reply.resolve(),
            None => {
                let digest = prompt_digest(&text);
                let preview: String = text.chars().take(80).collect();
                Err(BackendError::Protocol(format!(
                    "no scripted reply for role={} key={} prompt={preview:?}",
                    req.role,
                    &digest[..16]
                )))
            }
        }
    }
}

/// A generator backed by a closure over the request.
pub struct FnBackend<F> {
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&GenRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> Generator for FnBackend<F>
where
    F: Fn(&GenRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn generate(&self, req: &GenRequest) -> Result<String, BackendError> {
        (self.f)(req)
    }
}

fn unit_hash(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let bytes = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&bytes[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

/// Wraps a backend and fails a seeded, content-determined fraction of
/// attempts with transport errors. The decision depends only on the seed, the
/// request content and the attempt number.
#[derive(Debug)]
pub struct FaultInjector<B> {
    inner: B,
    rate: f64,
    seed: u64,
    injected: AtomicU64,
}

impl<B> FaultInjector<B> {
    pub fn new(inner: B, rate: f64, seed: u64) -> Self {
        Self { inner, rate: rate.clamp(0.0, 1.0), seed, injected: AtomicU64::new(0) }
    }

    /// Faults injected so far.
    pub fn injected(&self) -> u64 {
        self.injected.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn should_fail(&self, kind: &str, content: &str, attempt: u32) -> bool {
        let fail = unit_hash(&[
            &self.seed.to_le_bytes(),
            kind.as_bytes(),
            prompt_digest(content).as_bytes(),
            &attempt.to_le_bytes(),
        ]) < self.rate;
        if fail {
            self.injected.fetch_add(1, Ordering::SeqCst);
        }
        fail
    }
}

impl<B: Generator> Generator for FaultInjector<B> {
    fn generate(&self, req: &GenRequest) -> Result<String, BackendError> {
        if self.should_fail(req.role.as_str(), &joined_text(&req.parts), req.attempt) {
            return Err(BackendError::Transport(format!("injected fault (attempt {})", req.attempt)));
        }
        self.inner.generate(req)
    }
}

impl<B: Embedder> Embedder for FaultInjector<B> {
    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f32>>, BackendError> {
        if self.should_fail("embed", &req.texts.join("\u{1f}"), req.attempt) {
            return Err(BackendError::Transport(format!("injected fault (attempt {})", req.attempt)));
        }
        self.inner.embed(req)
    }
}

/// Feature-hashing embedder: each token of the lowercased text adds signed
/// unit contributions to a few seeded buckets. Token order does not matter,
/// identical texts map to identical vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    const FEATURES_PER_TOKEN: usize = 4;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for token in text.split_whitespace() {
            let token: String = token
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if token.is_empty() {
                continue;
            }
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(token.as_bytes());
            let bytes = h.finalize();
            for j in 0..Self::FEATURES_PER_TOKEN {
                let mut word = [0u8; 4];
                word.copy_from_slice(&bytes[4 * j..4 * j + 4]);
                let bucket = u32::from_le_bytes(word) as usize % self.dim;
                let sign = if bytes[16 + j] & 1 == 0 { 1.0 } else { -1.0 };
                v[bucket] += sign;
            }
        }
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256, 42)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(req.texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{complete_multimodal, complete_text, embed, GenParams, PromptPart, RetryPolicy};

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn scripted_echo() {
        let mock = ScriptedBackend::new().on(Role::Rerank, "PING", "PONG");
        let out = complete_text(&mock, Role::Rerank, "PING", &GenParams::default(), &RetryPolicy::immediate(2));
        assert_eq!(out.result.unwrap(), "PONG");
        // whitespace-normalized key
        let out = complete_text(&mock, Role::Rerank, "  PING\n", &GenParams::default(), &RetryPolicy::immediate(2));
        assert_eq!(out.result.unwrap(), "PONG");
    }

    #[test]
    fn unmatched_prompt_is_protocol_error_naming_key() {
        let mock = ScriptedBackend::new().on(Role::Rerank, "PING", "PONG");
        let out = complete_text(&mock, Role::Rerank, "HELLO", &GenParams::default(), &RetryPolicy::immediate(2));
        let err = out.result.unwrap_err();
        let key = &prompt_digest("HELLO")[..16];
        assert!(matches!(&err, BackendError::Protocol(msg) if msg.contains(key)), "{err}");
        assert_eq!(out.attempts, 1);
        // wrong role does not match an exact rule scoped to another role
        let out = complete_text(&mock, Role::Reasoning, "PING", &GenParams::default(), &RetryPolicy::immediate(2));
        assert!(out.result.is_err());
    }

    #[test]
    fn multimodal_keyed_on_text_parts() {
        let mock = ScriptedBackend::new().on(Role::Reasoning, "Question one\nOptions", "ANSWER: A");
        let parts = vec![
            PromptPart::text("Question one"),
            PromptPart::image(crate::model::ImageRef::new("x.png", crate::model::MediaKind::Png)),
            PromptPart::text("Options"),
        ];
        let out = complete_multimodal(&mock, Role::Reasoning, &parts, &GenParams::default(), &RetryPolicy::immediate(0));
        assert_eq!(out.result.unwrap(), "ANSWER: A");
    }

    #[test]
    fn regex_fallback_in_order() {
        let mock = ScriptedBackend::new()
            .on_regex(Some(Role::Confidence), r"case 1\b", "0.9")
            .on_regex(None, r"case", "generic");
        let p = GenParams::default();
        let r = RetryPolicy::immediate(0);
        assert_eq!(complete_text(&mock, Role::Confidence, "case 1", &p, &r).result.unwrap(), "0.9");
        assert_eq!(complete_text(&mock, Role::Confidence, "case 12", &p, &r).result.unwrap(), "generic");
        assert_eq!(complete_text(&mock, Role::Revision, "case 1", &p, &r).result.unwrap(), "generic");
    }

    #[test]
    fn script_file_rules() {
        let script: MockScript = serde_json::from_str(
            r#"{"rules":[
                {"role":"rerank","exact":"PING","reply":"PONG"},
                {"regex":"^down","error":"transport"}
            ]}"#,
        )
        .unwrap();
        let mock = ScriptedBackend::from_script(&script).unwrap();
        let p = GenParams::default();
        assert_eq!(complete_text(&mock, Role::Rerank, "PING", &p, &RetryPolicy::immediate(0)).result.unwrap(), "PONG");
        let out = complete_text(&mock, Role::Rerank, "down now", &p, &RetryPolicy::immediate(2));
        assert!(matches!(out.result, Err(BackendError::ExhaustedRetries { attempts: 3, .. })));
        assert_eq!(mock.calls(), 4);

        let bad: MockScript = serde_json::from_str(r#"{"rules":[{"exact":"x"}]}"#).unwrap();
        assert!(ScriptedBackend::from_script(&bad).is_err());
    }

    #[test]
    fn identical_texts_identical_vectors() {
        let e = HashEmbedder::new(64, 42);
        let out = embed(&e, &["x".into(), "x".into()], &RetryPolicy::immediate(0)).result.unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(e.embed_one("b a"), e.embed_one("a b"));
    }

    #[test]
    fn distinct_texts_golden_cosine() {
        // frozen from the seed-42, dim-64 embedder; cross-checked against a separate
    // SHA-256 feature-hashing script
        let e = HashEmbedder::new(64, 42);
        let a = e.embed_one("cardiomegaly with pulmonary edema");
        let b = e.embed_one("small left pleural effusion");
        let c = cosine(&a, &b);
        assert!(c < 1.0);
        assert!((c - GOLDEN_COSINE).abs() < 1e-12, "cosine = {c:.17}");
    }

    const GOLDEN_COSINE: f64 = -0.06299407883487121;

    #[test]
    fn fault_injection_is_content_determined() {
        let inner = FnBackend::new(|req: &GenRequest| Ok(joined_text(&req.parts)));
        let faulty = FaultInjector::new(inner, 0.5, 7);
        let mut pattern_a = Vec::new();
        let mut pattern_b = Vec::new();
        for i in 0..50 {
            let req = GenRequest {
                role: Role::Reasoning,
                parts: vec![PromptPart::text(format!("prompt {i}"))],
                params: GenParams::default(),
                attempt: 1,
            };
            pattern_a.push(faulty.generate(&req).is_err());
            pattern_b.push(faulty.generate(&req).is_err());
        }
        assert_eq!(pattern_a, pattern_b);
        let failures = pattern_a.iter().filter(|f| **f).count();
        assert!(failures > 10 && failures < 40);
        assert_eq!(faulty.injected(), 2 * failures as u64);
    }
}
