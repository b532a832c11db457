use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use mas_rvqa::backend::{
    complete_multimodal, embed, BackendError, GenParams, HttpBackend, HttpSettings, PromptPart, RetryPolicy, Role,
};
use mas_rvqa::{ImageRef, MediaKind};
use serde_json::Value;

struct Captured {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one canned `(status, extra headers, body)` per connection, in
/// order, and records what it received.
fn serve(responses: Vec<(u16, &'static str, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    thread::spawn(move || {
        for (status, headers, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut raw = vec![0u8; length];
            reader.read_exact(&mut raw).unwrap();
            sink.lock().unwrap().push(Captured {
                path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                authorization,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n{headers}\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), seen)
}

fn backend(base_url: String, key: Option<&str>) -> HttpBackend {
    let models = BTreeMap::from([(Role::Reasoning, "vision-model".to_string())]);
    let settings = HttpSettings { base_url, models, embed_model: "embed-model".into(), timeout: Duration::from_secs(5) };
    HttpBackend::new(settings, key.map(str::to_string)).unwrap()
}

fn chat_reply(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn multimodal_request_shape_and_auth() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("cxr.png");
    std::fs::write(&img, b"\x89PNG fake").unwrap();
    let (url, seen) = serve(vec![(200, "", chat_reply("ANSWER: B"))]);
    let parts = vec![
        PromptPart::text("Look at the image."),
        PromptPart::image(ImageRef::new(img.to_str().unwrap(), MediaKind::Png)),
        PromptPart::text("QUESTION: what is shown?"),
    ];
    let out = complete_multimodal(&backend(url, Some("sk-test")), Role::Reasoning, &parts, &GenParams::default(), &RetryPolicy::immediate(2));
    assert_eq!(out.result.unwrap(), "ANSWER: B");
    assert_eq!(out.attempts, 1);

    let seen = seen.lock().unwrap();
    let req = &seen[0];
    assert_eq!(req.path, "/v1/chat/completions");
    assert_eq!(req.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(req.body["model"], "vision-model");
    let content = req.body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(content.len(), 3);
    assert_eq!(content[0]["type"], "text");
    assert_eq!(content[1]["type"], "image_url");
    assert!(content[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    assert_eq!(content[2]["text"], "QUESTION: what is shown?");
}

#[test]
fn server_errors_and_rate_limits_are_retried() {
    let (url, seen) = serve(vec![
        (503, "", "{}".into()),
        (429, "Retry-After: 0\r\n", "{}".into()),
        (200, "", chat_reply("ok")),
    ]);
    let out = complete_multimodal(
        &backend(url, None),
        Role::Reasoning,
        &[PromptPart::text("hi")],
        &GenParams::default(),
        &RetryPolicy::immediate(2),
    );
    assert_eq!(out.result.unwrap(), "ok");
    assert_eq!(out.attempts, 3);
    assert!(seen.lock().unwrap().iter().all(|c| c.authorization.is_none()));
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "", r#"{"error":"bad"}"#.into())]);
    let out = complete_multimodal(&backend(url, None), Role::Reasoning, &[PromptPart::text("hi")], &GenParams::default(), &RetryPolicy::immediate(2));
    assert!(matches!(out.result, Err(BackendError::Protocol(_))));
    assert_eq!(out.attempts, 1);
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_server_exhausts_retries() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = complete_multimodal(
        &backend(format!("http://127.0.0.1:{port}"), None),
        Role::Reasoning,
        &[PromptPart::text("hi")],
        &GenParams::default(),
        &RetryPolicy::immediate(2),
    );
    assert!(matches!(out.result, Err(BackendError::ExhaustedRetries { attempts: 3, .. })));
}

#[test]
fn missing_image_is_reported() {
    let out = complete_multimodal(
        &backend("http://127.0.0.1:9".into(), None),
        Role::Reasoning,
        &[PromptPart::text("hi"), PromptPart::image(ImageRef::new("/nonexistent/x.png", MediaKind::Png))],
        &GenParams::default(),
        &RetryPolicy::immediate(2),
    );
    assert!(matches!(out.result, Err(BackendError::ImageUnreadable(_))));
}

#[test]
fn embeddings_round_trip() {
    let body = serde_json::json!({"data": [{"embedding": [1.0, 0.0]}, {"embedding": [0.0, 1.0]}]}).to_string();
    let (url, seen) = serve(vec![(200, "", body)]);
    let out = embed(&backend(url, None), &["a".into(), "b".into()], &RetryPolicy::immediate(0));
    assert_eq!(out.result.unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body["input"], serde_json::json!(["a", "b"]));
}
