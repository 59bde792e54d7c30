//! Wire-level tests for the two HTTP clients, against a scripted TCP stub:
//! request shape, auth header, retry/backoff behavior, and error mapping.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use metareview::backend::remote::{RemoteBackend, RemoteConfig};
use metareview::backend::{Backend, BackendError, FinishReason, PromptRequest};
use metareview::eval::alignscore::AlignScoreClient;
use metareview::eval::EvalError;

struct Reply {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
}

impl Reply {
    fn new(status: u16, body: &str) -> Self {
        Reply { status, headers: Vec::new(), body: body.to_string() }
    }
}

struct Recorded {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// One scripted reply per incoming connection, in order. Returns the base
/// URL, a channel of recorded requests, and the serving thread's handle.
fn serve(script: Vec<Reply>) -> (String, mpsc::Receiver<Recorded>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    let handle = std::thread::spawn(move || {
        for reply in script {
            let (mut stream, _) = listener.accept().unwrap();
            let recorded = read_request(&mut stream);
            tx.send(recorded).unwrap();
            write_reply(&mut stream, &reply);
        }
    });
    (base, rx, handle)
}

fn read_request(stream: &mut TcpStream) -> Recorded {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk).unwrap();
        assert!(n > 0, "client closed before sending a full request");
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).into_owned();
    let mut lines = head.lines();
    let path = lines.next().unwrap().split_whitespace().nth(1).unwrap().to_string();
    let mut content_length = 0usize;
    let mut authorization = None;
    for line in lines {
        if let Some((name, value)) = line.split_once(':') {
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().unwrap(),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = buf[header_end..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk).unwrap();
        assert!(n > 0, "client closed mid-body");
        body.extend_from_slice(&chunk[..n]);
    }
    Recorded {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    }
}

fn write_reply(stream: &mut TcpStream, reply: &Reply) {
    let mut head = format!(
        "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n",
        reply.status,
        reply.body.len()
    );
    for (name, value) in &reply.headers {
        head.push_str(&format!("{name}: {value}\r\n"));
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(reply.body.as_bytes()).unwrap();
    stream.flush().unwrap();
}

fn request() -> PromptRequest {
    PromptRequest {
        model_id: "test-model".into(),
        system_text: Some("be brief".into()),
        user_text: "summarize".into(),
        temperature: 0.4,
        max_output_tokens: 64,
        run_index: 0,
    }
}

fn config(base: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: base.to_string(),
        // points at a variable that exists in any environment
        api_key_env: "PATH".into(),
        max_retries: 3,
        initial_backoff: Duration::from_millis(1),
        request_timeout: Duration::from_secs(5),
    }
}

fn chat_body(content: &str, finish_reason: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": finish_reason,
        }],
        "usage": {"prompt_tokens": 42, "completion_tokens": 7},
    })
    .to_string()
}

#[test]
fn remote_sends_the_chat_protocol_and_parses_the_reply() {
    let (base, rx, handle) = serve(vec![Reply::new(200, &chat_body("All reviewers agree.", "stop"))]);
    let backend = RemoteBackend::new(config(&base)).unwrap();

    let completion = backend.complete(&request()).unwrap();
    assert_eq!(completion.text, "All reviewers agree.");
    assert_eq!(completion.finish_reason, FinishReason::Stop);
    assert_eq!(completion.usage.prompt_tokens, 42);
    assert_eq!(completion.usage.output_tokens, 7);
    assert!(!completion.from_cache);

    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/v1/chat/completions");
    assert_eq!(seen.authorization, Some(format!("Bearer {}", std::env::var("PATH").unwrap())));
    assert_eq!(seen.body["model"], "test-model");
    assert_eq!(seen.body["temperature"], 0.4);
    assert_eq!(seen.body["max_tokens"], 64);
    let messages = seen.body["messages"].as_array().unwrap();
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[1]["role"], "user");
    assert_eq!(messages[1]["content"], "summarize");
    handle.join().unwrap();
}

#[test]
fn remote_retries_transient_failures_until_one_succeeds() {
    let (base, rx, handle) = serve(vec![
        Reply::new(429, "slow down"),
        Reply::new(500, "boom"),
        Reply::new(200, &chat_body("ok", "stop")),
    ]);
    let backend = RemoteBackend::new(config(&base)).unwrap();

    let completion = backend.complete(&request()).unwrap();
    assert_eq!(completion.text, "ok");
    assert_eq!(rx.iter().count(), 3);
    handle.join().unwrap();
}

#[test]
fn remote_waits_at_least_the_server_hinted_delay() {
    let (base, _rx, handle) = serve(vec![
        Reply {
            status: 429,
            headers: vec![("retry-after", "1".to_string())],
            body: "busy".into(),
        },
        Reply::new(200, &chat_body("ok", "stop")),
    ]);
    let backend = RemoteBackend::new(config(&base)).unwrap();

    let started = Instant::now();
    backend.complete(&request()).unwrap();
    assert!(started.elapsed() >= Duration::from_secs(1));
    handle.join().unwrap();
}

#[test]
fn remote_gives_up_after_the_retry_budget() {
    let (base, rx, handle) = serve(vec![Reply::new(500, "boom"), Reply::new(503, "still down")]);
    let mut cfg = config(&base);
    cfg.max_retries = 1;
    let backend = RemoteBackend::new(cfg).unwrap();

    match backend.complete(&request()) {
        Err(BackendError::Unavailable { reason, .. }) => {
            assert!(reason.contains("2 attempts failed"), "{reason}");
            assert!(reason.contains("HTTP 503"), "{reason}");
        }
        other => panic!("expected Unavailable, got {other:?}"),
    }
    assert_eq!(rx.iter().count(), 2);
    handle.join().unwrap();
}

#[test]
fn remote_maps_fatal_statuses_without_retrying() {
    let (base, rx, handle) = serve(vec![Reply::new(401, "who are you")]);
    let backend = RemoteBackend::new(config(&base)).unwrap();
    assert!(matches!(backend.complete(&request()), Err(BackendError::Auth { .. })));
    assert_eq!(rx.iter().count(), 1);
    handle.join().unwrap();

    let overflow = r#"{"error": {"message": "This model's maximum context length is 4096 tokens."}}"#;
    let (base, rx, handle) = serve(vec![Reply::new(400, overflow)]);
    let backend = RemoteBackend::new(config(&base)).unwrap();
    assert!(matches!(
        backend.complete(&request()),
        Err(BackendError::ContextLengthExceeded)
    ));
    assert_eq!(rx.iter().count(), 1);
    handle.join().unwrap();

    let (base, rx, handle) = serve(vec![Reply::new(404, "no such route")]);
    let backend = RemoteBackend::new(config(&base)).unwrap();
    match backend.complete(&request()) {
        Err(BackendError::Protocol { reason }) => assert!(reason.contains("404"), "{reason}"),
        other => panic!("expected Protocol, got {other:?}"),
    }
    assert_eq!(rx.iter().count(), 1);
    handle.join().unwrap();
}

#[test]
fn remote_surfaces_truncation_and_malformed_payloads() {
    let (base, _rx, handle) = serve(vec![Reply::new(200, &chat_body("cut of", "length"))]);
    let backend = RemoteBackend::new(config(&base)).unwrap();
    assert_eq!(backend.complete(&request()).unwrap().finish_reason, FinishReason::Length);
    handle.join().unwrap();

    let (base, _rx, handle) = serve(vec![Reply::new(200, "not json")]);
    let backend = RemoteBackend::new(config(&base)).unwrap();
    match backend.complete(&request()) {
        Err(BackendError::Protocol { reason }) => {
            assert!(reason.contains("malformed"), "{reason}")
        }
        other => panic!("expected Protocol, got {other:?}"),
    }
    handle.join().unwrap();

    let (base, _rx, handle) = serve(vec![Reply::new(200, r#"{"choices": []}"#)]);
    let backend = RemoteBackend::new(config(&base)).unwrap();
    match backend.complete(&request()) {
        Err(BackendError::Protocol { reason }) => {
            assert!(reason.contains("no choices"), "{reason}")
        }
        other => panic!("expected Protocol, got {other:?}"),
    }
    handle.join().unwrap();
}

#[test]
fn alignscore_round_trips_scores_and_maps_failures() {
    let (base, rx, handle) = serve(vec![Reply::new(200, r#"{"score": 0.7312}"#)]);
    let client = AlignScoreClient::new(&base).unwrap();
    let score = client.score("the reviews", "the claim").unwrap();
    assert!((score - 0.7312).abs() < 1e-12);
    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/score");
    assert_eq!(seen.body["context"], "the reviews");
    assert_eq!(seen.body["claim"], "the claim");
    assert_eq!(seen.body["mode"], "nli_sp");
    handle.join().unwrap();

    let (base, _rx, handle) = serve(vec![Reply::new(500, "model not loaded")]);
    let client = AlignScoreClient::new(&base).unwrap();
    match client.score("c", "x") {
        Err(EvalError::ScorerUnavailable { reason, .. }) => {
            assert!(reason.contains("500"), "{reason}")
        }
        other => panic!("expected ScorerUnavailable, got {other:?}"),
    }
    handle.join().unwrap();

    let (base, _rx, handle) = serve(vec![Reply::new(200, r#"{"points": 1}"#)]);
    let client = AlignScoreClient::new(&base).unwrap();
    assert!(matches!(client.score("c", "x"), Err(EvalError::ScorerProtocol { .. })));
    handle.join().unwrap();
}
