use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use bioner_core::inference::{
    run_batch, Backend, BackendErrorKind, BatchOptions, GenerationRequest, RetryPolicy, WireBackend, WireConfig,
};
use serde_json::Value;

struct Reply {
    status: u16,
    body: String,
}

fn ok(content: &str) -> Reply {
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]});
    Reply { status: 200, body: body.to_string() }
}

fn read_request(stream: &mut TcpStream) -> (String, Value) {
    let mut reader = BufReader::new(stream);
    let mut head = String::new();
    let mut len = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        head.push_str(&line);
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    (head, serde_json::from_slice(&body).unwrap())
}

/// Serves the scripted replies in order, then repeats the last one.
/// Returns the base URL and the captured request heads and bodies.
type Seen = Arc<Mutex<Vec<(String, Value)>>>;

fn stub(replies: Vec<Reply>) -> (String, Seen) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let mut stream = stream.unwrap();
            let req = read_request(&mut stream);
            log.lock().unwrap().push(req);
            let r = &replies[i.min(replies.len() - 1)];
            let resp = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                r.status,
                r.body.len(),
                r.body
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn backend(url: &str) -> WireBackend {
    let mut cfg = WireConfig::new(url, "test-model");
    cfg.api_key_env = "BIONER_TEST_UNSET_TOKEN".into();
    cfg.timeout = Duration::from_secs(5);
    WireBackend::new(cfg).unwrap()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(5) }
}

#[test]
fn returns_first_choice_content() {
    let (url, seen) = stub(vec![ok("X")]);
    let b = backend(&url);
    let mut req = GenerationRequest::new(0, "tag this");
    req.temperature = 0.25;
    assert_eq!(b.generate(&req).unwrap(), "X");
    let seen = seen.lock().unwrap();
    let (head, body) = &seen[0];
    assert!(head.starts_with("POST /v1/chat/completions "));
    assert!(!head.to_ascii_lowercase().contains("authorization"));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "tag this");
    assert_eq!(body["temperature"], 0.25);
}

#[test]
fn server_errors_are_retried() {
    let fail = || Reply { status: 500, body: "boom".into() };
    let (url, seen) = stub(vec![fail(), fail(), ok("done")]);
    let b = backend(&url);
    let reqs = [GenerationRequest::new(0, "p")];
    let out = run_batch(&reqs, &b, &BatchOptions { parallelism: 1, retry: fast_retry() });
    assert_eq!(out[0].as_ref().unwrap(), "done");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_give_up_with_status() {
    let (url, seen) = stub(vec![Reply { status: 503, body: "busy".into() }]);
    let b = backend(&url);
    let out = run_batch(&[GenerationRequest::new(0, "p")], &b, &BatchOptions { parallelism: 1, retry: fast_retry() });
    assert_eq!(out[0].as_ref().unwrap_err().kind, BackendErrorKind::HttpStatus(503));
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![Reply { status: 404, body: "no".into() }]);
    let b = backend(&url);
    let out = run_batch(&[GenerationRequest::new(0, "p")], &b, &BatchOptions { parallelism: 1, retry: fast_retry() });
    assert_eq!(out[0].as_ref().unwrap_err().kind, BackendErrorKind::HttpStatus(404));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn missing_choices_is_malformed() {
    let (url, _) = stub(vec![Reply { status: 200, body: r#"{"id":"x"}"#.into() }]);
    let err = backend(&url).generate(&GenerationRequest::new(0, "p")).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::MalformedResponse);
}

#[test]
fn refused_connection_is_transport() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = backend(&format!("http://127.0.0.1:{port}")).generate(&GenerationRequest::new(0, "p")).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::Transport);
    assert!(err.is_transient());
}

#[test]
fn bearer_token_comes_from_env() {
    let (url, seen) = stub(vec![ok("X")]);
    std::env::set_var("BIONER_TEST_TOKEN", "s3cret");
    let mut cfg = WireConfig::new(url, "m");
    cfg.api_key_env = "BIONER_TEST_TOKEN".into();
    WireBackend::new(cfg).unwrap().generate(&GenerationRequest::new(0, "p")).unwrap();
    let head = seen.lock().unwrap()[0].0.to_ascii_lowercase();
    assert!(head.contains("authorization: bearer s3cret"));
}
