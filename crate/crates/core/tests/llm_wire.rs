//! The HTTP transport against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use m3hop_core::cot::{request_rationale, HttpTransport, LlmEndpointConfig, RationaleCache};
use m3hop_core::datamodel::Hop;
use m3hop_core::Error;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    request_line: String,
    headers: Vec<(String, String)>,
    body: String,
}

/// Serve one connection per scripted `(status, body)` and record the requests.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k == "content-length")
                .map(|(_, v)| v.parse().unwrap())
                .unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (base, seen, handle)
}

fn completion(text: &str) -> String {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}).to_string()
}

fn cfg(base: &str) -> LlmEndpointConfig {
    LlmEndpointConfig {
        base_url: base.to_string(),
        retries: 2,
        timeout_secs: 5,
        ..LlmEndpointConfig::default()
    }
}

#[test]
fn request_shape_and_response_parsing() {
    let (base, seen, h) = serve(vec![(200, completion("anger and contempt"))]);
    let dir = tempfile::tempdir().unwrap();
    let cache = RationaleCache::open(dir.path()).unwrap();
    let t = HttpTransport::new(Some("sekret".into()));
    let r = request_rationale(&cfg(&base), Hop::Emotion, "the prompt", &cache, &t).unwrap();
    h.join().unwrap();
    assert_eq!(r.text, "anger and contempt");
    assert!(!r.cached);
    assert_eq!(r.requests, 1);

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].request_line, "POST /v1/chat/completions HTTP/1.1");
    let header = |k: &str| seen[0].headers.iter().find(|(h, _)| h == k).map(|(_, v)| v.clone());
    assert_eq!(header("authorization").as_deref(), Some("Bearer sekret"));
    assert!(header("content-type").unwrap().starts_with("application/json"));
    let body: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(
        body,
        json!({
            "model": "mistralai/Mistral-7B-Instruct-v0.1",
            "temperature": 0.0,
            "max_tokens": 256,
            "messages": [{"role": "user", "content": "the prompt"}],
        })
    );

    // now cached: no server needed
    let again = request_rationale(&cfg(&base), Hop::Emotion, "the prompt", &cache, &t).unwrap();
    assert!(again.cached);
    assert_eq!(again.requests, 0);
    assert_eq!(again.text, "anger and contempt");
}

#[test]
fn server_errors_are_retried() {
    let (base, seen, h) = serve(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        (200, completion("finally")),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let cache = RationaleCache::open(dir.path()).unwrap();
    let r = request_rationale(&cfg(&base), Hop::Target, "p", &cache, &HttpTransport::new(None)).unwrap();
    h.join().unwrap();
    assert_eq!(r.requests, 3);
    assert_eq!(r.text, "finally");
    assert!(seen.lock().unwrap()[0].headers.iter().all(|(k, _)| k != "authorization"));
}

#[test]
fn client_errors_and_empty_text_fail_without_caching() {
    let (base, _, h) = serve(vec![(404, r#"{"error":"no such model"}"#.into()), (200, completion("   "))]);
    let dir = tempfile::tempdir().unwrap();
    let cache = RationaleCache::open(dir.path()).unwrap();
    let t = HttpTransport::new(None);
    let err = request_rationale(&cfg(&base), Hop::Context, "p", &cache, &t).unwrap_err();
    assert!(matches!(err, Error::Endpoint { status: 404, ref body } if body.contains("no such model")), "{err}");
    let err = request_rationale(&cfg(&base), Hop::Context, "p", &cache, &t).unwrap_err();
    assert!(matches!(err, Error::EmptyRationale(_)), "{err}");
    h.join().unwrap();
    assert_eq!(cache.len().unwrap(), 0);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let cache = RationaleCache::open(dir.path()).unwrap();
    let c = LlmEndpointConfig {
        retries: 0,
        ..cfg(&format!("http://127.0.0.1:{port}/v1"))
    };
    let err = request_rationale(&c, Hop::Emotion, "p", &cache, &HttpTransport::new(None)).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}
