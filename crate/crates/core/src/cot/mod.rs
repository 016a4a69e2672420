//! Three-hop prompting: prompt rendering, the chat-completions client and
//! the content-addressed rationale cache.

mod cache;
mod prompt;
mod transport;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use cache::{CacheEntry, RationaleCache};
pub use prompt::{
    build_chained_prompt, build_prompt, render_eor_block, PromptHop, CONTEXT_INSTRUCTION, EMOTION_INSTRUCTION,
    EOR_PLACEHOLDER, NO_RELATIONS_SENTINEL, TARGET_INSTRUCTION, TEXT_PLACEHOLDER,
};
pub use transport::{HttpResponse, HttpTransport, MockTransport, Transport, API_KEY_ENV};

use crate::datamodel::{select_top_eor, Hop, MemeRecord, RationaleRecord};
use crate::error::{Error, Result};

pub const DEFAULT_MODEL: &str = "mistralai/Mistral-7B-Instruct-v0.1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: DEFAULT_MODEL.into(),
            temperature: 0.0,
            max_tokens: 256,
            timeout_secs: 60,
            retries: 2,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.model_name.is_empty() {
            return Err(Error::Config("model name must not be empty".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// The request body sent for `prompt`.
    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model_name,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rationale {
    pub text: String,
    pub cached: bool,
    /// HTTP requests made for this rationale, retries included.
    pub requests: usize,
}

fn parse_completion(body: &str) -> Result<String> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| Error::Transport(format!("response is not JSON: {e}")))?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Transport("response lacks choices[0].message.content".into()))
}

/// Return the rationale for `prompt`, from the cache when possible.
pub fn request_rationale(
    cfg: &LlmEndpointConfig,
    hop: Hop,
    prompt: &str,
    cache: &RationaleCache,
    transport: &dyn Transport,
) -> Result<Rationale> {
    let key = RationaleCache::key(&cfg.model_name, hop, prompt);
    if let Some(entry) = cache.get(&key)? {
        return Ok(Rationale {
            text: entry.text,
            cached: true,
            requests: 0,
        });
    }

    let body = cfg.request_body(prompt).to_string();
    let url = cfg.completions_url();
    let timeout = Duration::from_secs(cfg.timeout_secs.max(1));
    let mut requests = 0;
    let mut last_err = String::new();
    for attempt in 0..=cfg.retries {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(200 * u64::from(attempt)));
        }
        requests += 1;
        match transport.post_json(&url, &body, timeout) {
            Ok(resp) if (200..300).contains(&resp.status) => {
                let text = parse_completion(&resp.body)?;
                if text.trim().is_empty() {
                    return Err(Error::EmptyRationale(hop.tag().into()));
                }
                cache.put(&key, &cfg.model_name, hop, &text)?;
                return Ok(Rationale {
                    text,
                    cached: false,
                    requests,
                });
            }
            Ok(resp) if resp.status >= 500 && attempt < cfg.retries => {
                last_err = format!("HTTP {}", resp.status);
            }
            Ok(resp) => {
                return Err(Error::Endpoint {
                    status: resp.status,
                    body: resp.body.chars().take(200).collect(),
                })
            }
            Err(e) => last_err = e,
        }
    }
    Err(Error::Transport(format!(
        "{url}: giving up after {requests} attempt(s): {last_err}"
    )))
}

#[derive(Clone, Debug)]
pub struct RationalizeOptions {
    pub parallelism: usize,
    /// Abort when more than this fraction of requests fail.
    pub max_failure_fraction: f64,
    pub top_k: usize,
    /// Thread earlier hops' rationales into later prompts.
    pub chained: bool,
    /// When false, prompts are built with an empty relation block.
    pub use_scene_graph: bool,
}

impl Default for RationalizeOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            max_failure_fraction: 0.05,
            top_k: 5,
            chained: false,
            use_scene_graph: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HopFailure {
    pub meme_id: String,
    pub hop: Hop,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct RationalizeOutcome {
    /// Sorted by `(meme_id, hop)`; tokens are empty.
    pub rationales: Vec<RationaleRecord>,
    pub failures: Vec<HopFailure>,
    /// Memes with at least one failed hop; none of their hops are emitted.
    pub failed_memes: Vec<String>,
    pub requests: usize,
    pub cache_hits: usize,
}

/// The rendered (non-chained) prompts for one meme, in hop order.
pub fn meme_prompts(hops: &[PromptHop; 3], record: &MemeRecord, opts: &RationalizeOptions) -> Vec<(Hop, String)> {
    let eors = if opts.use_scene_graph {
        select_top_eor(&record.eors, opts.top_k)
    } else {
        Vec::new()
    };
    hops.iter()
        .map(|h| (h.hop(), build_prompt(h, &record.text, &eors)))
        .collect()
}

fn check_hops(hops: &[PromptHop; 3]) -> Result<()> {
    let got: Vec<Hop> = hops.iter().map(PromptHop::hop).collect();
    if got != Hop::ALL {
        return Err(Error::Config(format!("hops must be [E, T, C] in order, got {got:?}")));
    }
    Ok(())
}

struct CountingTransport<'a> {
    inner: &'a dyn Transport,
    calls: AtomicUsize,
}

impl Transport for CountingTransport<'_> {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> std::result::Result<HttpResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.post_json(url, body, timeout)
    }
}

struct MemeResult {
    records: Vec<RationaleRecord>,
    failures: Vec<HopFailure>,
    attempted: usize,
    cache_hits: usize,
}

fn rationalize_meme(
    record: &MemeRecord,
    hops: &[PromptHop; 3],
    cfg: &LlmEndpointConfig,
    cache: &RationaleCache,
    transport: &dyn Transport,
    opts: &RationalizeOptions,
) -> MemeResult {
    let eors = if opts.use_scene_graph {
        select_top_eor(&record.eors, opts.top_k)
    } else {
        Vec::new()
    };
    let mut out = MemeResult {
        records: Vec::new(),
        failures: Vec::new(),
        attempted: 0,
        cache_hits: 0,
    };
    let mut prior: Vec<(Hop, String)> = Vec::new();
    for hop in hops {
        let prompt = if opts.chained {
            let refs: Vec<(Hop, &str)> = prior.iter().map(|(h, t)| (*h, t.as_str())).collect();
            build_chained_prompt(hop, &record.text, &eors, &refs)
        } else {
            build_prompt(hop, &record.text, &eors)
        };
        out.attempted += 1;
        match request_rationale(cfg, hop.hop(), &prompt, cache, transport) {
            Ok(r) => {
                out.cache_hits += usize::from(r.cached);
                prior.push((hop.hop(), r.text.clone()));
                out.records.push(RationaleRecord {
                    meme_id: record.id.clone(),
                    hop: hop.hop(),
                    text: r.text,
                    tokens: Vec::new(),
                });
            }
            Err(e) => {
                out.failures.push(HopFailure {
                    meme_id: record.id.clone(),
                    hop: hop.hop(),
                    error: e.to_string(),
                });
                if opts.chained {
                    break;
                }
            }
        }
    }
    out
}

/// Produce E/T/C rationale texts for every meme.
///
/// A meme with any failed hop contributes no records; it is listed in
/// `failed_memes`. Re-running over the same cache sends no requests for
/// completed memes.
pub fn rationalize_dataset(
    records: &[MemeRecord],
    hops: &[PromptHop; 3],
    cfg: &LlmEndpointConfig,
    cache: &RationaleCache,
    transport: &dyn Transport,
    opts: &RationalizeOptions,
) -> Result<RationalizeOutcome> {
    check_hops(hops)?;
    cfg.validate()?;
    let transport = CountingTransport {
        inner: transport,
        calls: AtomicUsize::new(0),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<MemeResult>> = Mutex::new(Vec::with_capacity(records.len()));
    let workers = opts.parallelism.clamp(1, records.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = records.get(i) else { break };
                let r = rationalize_meme(record, hops, cfg, cache, &transport, opts);
                results.lock().expect("results lock").push(r);
            });
        }
    });

    let mut outcome = RationalizeOutcome {
        requests: transport.calls.load(Ordering::SeqCst),
        ..Default::default()
    };
    let mut attempted = 0;
    for r in results.into_inner().expect("results lock") {
        attempted += r.attempted;
        outcome.cache_hits += r.cache_hits;
        if r.failures.is_empty() {
            outcome.rationales.extend(r.records);
        } else {
            outcome.failed_memes.push(r.failures[0].meme_id.clone());
            outcome.failures.extend(r.failures);
        }
    }
    outcome
        .rationales
        .sort_by(|a, b| (&a.meme_id, a.hop).cmp(&(&b.meme_id, b.hop)));
    outcome.failed_memes.sort();
    outcome
        .failures
        .sort_by(|a, b| (&a.meme_id, a.hop).cmp(&(&b.meme_id, b.hop)));

    let failed = outcome.failures.len();
    if attempted > 0 && failed as f64 / attempted as f64 > opts.max_failure_fraction {
        let listed: Vec<String> = outcome
            .failures
            .iter()
            .take(10)
            .map(|f| format!("{}/{}: {}", f.meme_id, f.hop, f.error))
            .collect();
        return Err(Error::TooManyFailures(format!(
            "{failed} of {attempted} requests failed (limit {:.1}%); first failures: {}",
            opts.max_failure_fraction * 100.0,
            listed.join("; ")
        )));
    }
    Ok(outcome)
}
