use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Something that can POST a JSON body and return the raw response.
/// `Err` means the request never produced an HTTP response.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> std::result::Result<HttpResponse, String>;
}

/// Blocking HTTP transport. Sends `Authorization: Bearer <key>` when a key is set.
pub struct HttpTransport {
    api_key: Option<String>,
}

/// Environment variable holding the endpoint credential.
pub const API_KEY_ENV: &str = "M3HOP_API_KEY";

impl HttpTransport {
    pub fn new(api_key: Option<String>) -> Self {
        Self { api_key }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> std::result::Result<HttpResponse, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Offline backend answering from a canned `prompt → text` map, in the same
/// response shape as a chat-completions server. Unknown prompts get HTTP 404.
#[derive(Debug, Default)]
pub struct MockTransport {
    answers: BTreeMap<String, String>,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn new(answers: BTreeMap<String, String>) -> Self {
        Self {
            answers,
            calls: AtomicUsize::new(0),
        }
    }

    /// Load a JSON object mapping prompts to completion texts.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let answers = serde_json::from_str(&s).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(Self::new(answers))
    }

    /// Number of requests received so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for MockTransport {
    fn post_json(&self, _url: &str, body: &str, _timeout: Duration) -> std::result::Result<HttpResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let request: Value = serde_json::from_str(body).map_err(|e| format!("mock got invalid JSON: {e}"))?;
        let prompt = request["messages"][0]["content"].as_str().unwrap_or_default();
        Ok(match self.answers.get(prompt) {
            Some(text) => HttpResponse {
                status: 200,
                body: json!({
                    "object": "chat.completion",
                    "model": request["model"],
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
                })
                .to_string(),
            },
            None => HttpResponse {
                status: 404,
                body: json!({"error": "no canned answer for prompt"}).to_string(),
            },
        })
    }
}
