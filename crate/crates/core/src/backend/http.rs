//! Client for OpenAI-compatible chat-completions and embeddings endpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_uniform_dim, BackendError, EmbedRequest, Embedder, GenRequest, Generator, PromptPart, Role};
use crate::model::ImageRef;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "MAS_RVQA_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    /// Server root; requests go to `{base_url}/v1/...`.
    pub base_url: String,
    /// Chat model per agent role.
    pub models: BTreeMap<Role, String>,
    pub embed_model: String,
    pub timeout: Duration,
}

/// Blocking HTTP backend. Safe to share between worker threads.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    settings: HttpSettings,
    api_key: Option<String>,
    client: Client,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("building HTTP client: {e}")))?;
        Ok(Self { settings, api_key, client })
    }

    /// Reads the bearer token from [`API_KEY_ENV`].
    pub fn from_env(settings: HttpSettings) -> Result<Self, BackendError> {
        Self::new(settings, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{path}", self.settings.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendError::RateLimited { retry_after });
        }
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(BackendError::Transport(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn image_url(image: &ImageRef) -> Result<String, BackendError> {
    if image.is_url() {
        return Ok(image.locator.clone());
    }
    let bytes = std::fs::read(&image.locator).map_err(|_| BackendError::ImageUnreadable(Path::new(&image.locator).to_path_buf()))?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", image.media_kind.mime()))
}

/// Request body for `POST /v1/chat/completions`. Parts are sent in order as
/// the content array of a single user message; local images are inlined as
/// base64 data URLs.
pub fn build_chat_body(model: &str, req: &GenRequest) -> Result<Value, BackendError> {
    let content = req
        .parts
        .iter()
        .map(|part| match part {
            PromptPart::Text { text } => Ok(json!({"type": "text", "text": text})),
            PromptPart::Image { image } => Ok(json!({"type": "image_url", "image_url": {"url": image_url(image)?}})),
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": req.params.temperature,
        "max_tokens": req.params.max_tokens,
    });
    if let Some(stop) = &req.params.stop {
        body["stop"] = json!(stop);
    }
    Ok(body)
}

pub fn parse_chat_response(body: &Value) -> Result<String, BackendError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
}

pub fn build_embedding_body(model: &str, texts: &[String]) -> Value {
    json!({"model": model, "input": texts})
}

pub fn parse_embedding_response(body: &Value, expected: usize) -> Result<Vec<Vec<f32>>, BackendError> {
    let data = body
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("missing data array".into()))?;
    if data.len() != expected {
        return Err(BackendError::Protocol(format!("expected {expected} embeddings, got {}", data.len())));
    }
    let vectors = data
        .iter()
        .enumerate()
        .map(|(i, item)| {
            item.get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::Protocol(format!("data[{i}].embedding missing")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .map(|f| f as f32)
                        .ok_or_else(|| BackendError::Protocol(format!("data[{i}].embedding has a non-number")))
                })
                .collect::<Result<Vec<f32>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    check_uniform_dim(&vectors)?;
    Ok(vectors)
}

impl Generator for HttpBackend {
    fn generate(&self, req: &GenRequest) -> Result<String, BackendError> {
        let model = self
            .settings
            .models
            .get(&req.role)
            .ok_or_else(|| BackendError::InvalidRequest(format!("no model configured for role {}", req.role)))?;
        let body = build_chat_body(model, req)?;
        parse_chat_response(&self.post("chat/completions", &body)?)
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f32>>, BackendError> {
        let body = build_embedding_body(&self.settings.embed_model, &req.texts);
        parse_embedding_response(&self.post("embeddings", &body)?, req.texts.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::GenParams;
    use crate::model::MediaKind;

    fn req(parts: Vec<PromptPart>) -> GenRequest {
        GenRequest { role: Role::Reasoning, parts, params: GenParams::default(), attempt: 1 }
    }

    #[test]
    fn body_keeps_part_order_and_inlines_images() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.jpg");
        std::fs::write(&a, [0x89, b'P', b'N', b'G']).unwrap();
        std::fs::write(&b, [0xff, 0xd8]).unwrap();
        let body = build_chat_body(
            "m",
            &req(vec![
                PromptPart::text("look"),
                PromptPart::image(ImageRef::new(a.to_str().unwrap(), MediaKind::Png)),
                PromptPart::image(ImageRef::new(b.to_str().unwrap(), MediaKind::Jpeg)),
            ]),
        )
        .unwrap();
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content.len(), 3);
        assert_eq!(content[0], json!({"type": "text", "text": "look"}));
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,iVBORw==");
        assert_eq!(content[2]["image_url"]["url"], "data:image/jpeg;base64,/9g=");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["model"], "m");
    }

    #[test]
    fn missing_image_is_unreadable() {
        let err = build_chat_body("m", &req(vec![
            PromptPart::text("look"),
            PromptPart::image(ImageRef::new("/nonexistent/x.png", MediaKind::Png)),
        ]))
        .unwrap_err();
        assert_eq!(err, BackendError::ImageUnreadable("/nonexistent/x.png".into()));
    }

    #[test]
    fn parses_choice_content() {
        let body = json!({"choices": [{"message": {"role": "assistant", "content": "ANSWER: B"}}]});
        assert_eq!(parse_chat_response(&body).unwrap(), "ANSWER: B");
        assert!(matches!(parse_chat_response(&json!({"choices": []})), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn ragged_embeddings() {
        let body = json!({"data": [{"embedding": [0.1, 0.2]}, {"embedding": [0.3]}]});
        assert_eq!(
            parse_embedding_response(&body, 2).unwrap_err(),
            BackendError::DimensionMismatch { expected: 2, got: 1 }
        );
        let ok = json!({"data": [{"embedding": [0.5, 0.25]}]});
        assert_eq!(parse_embedding_response(&ok, 1).unwrap(), vec![vec![0.5, 0.25]]);
    }
}
