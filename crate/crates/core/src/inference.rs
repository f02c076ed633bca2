//! Generation backends and batched, bounded-concurrency execution.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codec::{self, Strategy};
use crate::corpus::SchemaRegistry;
use crate::promptgen::PromptTemplate;
use crate::model::Sentence;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub id: u64,
    pub prompt: String,
    pub max_output_chars: usize,
    pub temperature: f64,
}

impl GenerationRequest {
    pub const DEFAULT_MAX_OUTPUT_CHARS: usize = 4096;

    pub fn new(id: u64, prompt: impl Into<String>) -> Self {
        GenerationRequest { id, prompt: prompt.into(), max_output_chars: Self::DEFAULT_MAX_OUTPUT_CHARS, temperature: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "status")]
pub enum BackendErrorKind {
    Timeout,
    Transport,
    HttpStatus(u16),
    MalformedResponse,
    UnknownSentence,
    InvalidRequest,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind}: {detail}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub detail: String,
}

impl fmt::Display for BackendErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendErrorKind::Timeout => f.write_str("timeout"),
            BackendErrorKind::Transport => f.write_str("transport error"),
            BackendErrorKind::HttpStatus(code) => write!(f, "HTTP status {code}"),
            BackendErrorKind::MalformedResponse => f.write_str("malformed response"),
            BackendErrorKind::UnknownSentence => f.write_str("unknown sentence"),
            BackendErrorKind::InvalidRequest => f.write_str("invalid request"),
            BackendErrorKind::Other => f.write_str("backend error"),
        }
    }
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, detail: impl Into<String>) -> Self {
        BackendError { kind, detail: detail.into() }
    }

    /// Timeouts, transport failures, 429 and 5xx responses are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self.kind {
            BackendErrorKind::Timeout | BackendErrorKind::Transport => true,
            BackendErrorKind::HttpStatus(code) => code == 429 || code >= 500,
            _ => false,
        }
    }
}

/// A text generation backend. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, ..Self::default() }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `f` until it succeeds, fails permanently, or retries run out.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    log::debug!("retrying after {e} (attempt {})", attempt + 1);
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { parallelism: 4, retry: RetryPolicy::default() }
    }
}

/// Applies `f` to every item on at most `parallelism` worker threads.
/// Results are stored by slot, so output order matches input order.
pub fn run_pool<T, U, F>(items: &[T], parallelism: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let n = items.len();
    let workers = parallelism.max(1).min(n);
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<U>>> = (0..n).map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i, &items[i]);
                *slots[i].lock().expect("slot lock poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock poisoned").expect("every slot is filled"))
        .collect()
}

/// Runs every request through `backend`; failures are recorded per slot.
pub fn run_batch(
    requests: &[GenerationRequest],
    backend: &dyn Backend,
    opts: &BatchOptions,
) -> Vec<Result<String, BackendError>> {
    run_pool(requests, opts.parallelism, |_, req| {
        if req.max_output_chars == 0 {
            return Err(BackendError::new(BackendErrorKind::InvalidRequest, "max_output_chars must be positive"));
        }
        opts.retry.run(|| backend.generate(req))
    })
}

/// Settings for an HTTP chat-completions server.
#[derive(Debug, Clone, PartialEq)]
pub struct WireConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
}

impl WireConfig {
    pub const DEFAULT_API_KEY_ENV: &'static str = "LLM_API_KEY";

    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        WireConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout: Duration::from_secs(120),
            api_key_env: Self::DEFAULT_API_KEY_ENV.to_string(),
        }
    }
}

/// Backend speaking the chat-completions protocol.
pub struct WireBackend {
    config: WireConfig,
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl WireBackend {
    pub fn new(config: WireConfig) -> Result<Self, BackendError> {
        if config.endpoint.trim().is_empty() {
            return Err(BackendError::new(BackendErrorKind::InvalidRequest, "endpoint URL is empty"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::new(BackendErrorKind::Transport, e.to_string()))?;
        let token = std::env::var(&config.api_key_env).ok().filter(|t| !t.is_empty());
        let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
        Ok(WireBackend { config, url, token, client })
    }

    pub fn request_body(&self, request: &GenerationRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_chars,
        })
    }
}

/// Extracts `choices[0].message.content` from a chat-completions response.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let malformed = |d: &str| BackendError::new(BackendErrorKind::MalformedResponse, d.to_string());
    let v: Value = serde_json::from_str(body).map_err(|e| malformed(&e.to_string()))?;
    let choices = v.get("choices").and_then(Value::as_array).ok_or_else(|| malformed("response has no choices list"))?;
    choices
        .first()
        .and_then(|c| c.pointer("/message/content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| malformed("choices[0].message.content missing"))
}

impl Backend for WireBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.url).json(&self.request_body(request));
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            let kind = if e.is_timeout() { BackendErrorKind::Timeout } else { BackendErrorKind::Transport };
            BackendError::new(kind, e.to_string())
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| BackendError::new(BackendErrorKind::Transport, e.to_string()))?;
        if !status.is_success() {
            let snippet: String = body.chars().take(200).collect();
            return Err(BackendError::new(BackendErrorKind::HttpStatus(status.as_u16()), snippet));
        }
        parse_chat_response(&body)
    }
}

/// A perfect model: finds the prompt's sentence in the corpus and answers
/// with its gold encoding.
pub struct EchoGoldBackend {
    template: PromptTemplate,
    schemas: SchemaRegistry,
    index: HashMap<(String, String), Sentence>,
}

impl EchoGoldBackend {
    pub fn new(corpus: &[Sentence], schemas: &SchemaRegistry, template: &PromptTemplate) -> Self {
        let mut index = HashMap::new();
        for s in corpus {
            index.entry((s.dataset.clone(), s.text.clone())).or_insert_with(|| s.clone());
        }
        let used: SchemaRegistry =
            schemas.iter().filter(|(k, _)| corpus.iter().any(|s| &s.dataset == *k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        EchoGoldBackend { template: template.clone(), schemas: used, index }
    }

    pub fn strategy(&self) -> Strategy {
        self.template.strategy
    }
}

impl Backend for EchoGoldBackend {
    fn name(&self) -> &str {
        "echo-gold"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        for schema in self.schemas.values() {
            let Some(text) = self.template.extract_sentence(&request.prompt, schema) else {
                continue;
            };
            if let Some(s) = self.index.get(&(schema.name.clone(), text.to_string())) {
                return codec::encode(self.template.strategy, s, schema)
                    .map(|t| t.payload)
                    .map_err(|e| BackendError::new(BackendErrorKind::Other, e.to_string()));
            }
        }
        Err(BackendError::new(BackendErrorKind::UnknownSentence, "prompt sentence is not in the corpus"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Substitute,
    Delete,
    /// A character inserted before the indexed one.
    Insert,
}

/// One noise edit, located by the index of the affected original character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseEdit {
    pub position: usize,
    pub kind: EditKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbation {
    pub text: String,
    pub edits: Vec<NoiseEdit>,
}

/// Character noise: each eligible character is, with probability `rate`,
/// substituted, deleted, or preceded by an inserted character (equally
/// likely). For symbolic payloads the `"type: "` label of each line is left
/// intact so that only the sentence copies are corrupted.
pub fn perturb_payload<R: Rng>(payload: &str, rate: f64, strategy: Strategy, rng: &mut R) -> Perturbation {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    let chars: Vec<char> = payload.chars().collect();
    let mut protected = vec![false; chars.len()];
    if strategy == Strategy::Symbolic {
        let mut line_start = 0;
        for line in payload.split('\n') {
            let n = line.chars().count();
            if let Some(byte) = line.find(": ") {
                let label = line[..byte].chars().count() + 2;
                protected[line_start..line_start + label].iter_mut().for_each(|p| *p = true);
            }
            line_start += n + 1;
        }
    }
    let mut text = String::with_capacity(payload.len() + 8);
    let mut edits = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if protected[i] || c == '\n' || !rng.gen_bool(rate.clamp(0.0, 1.0)) {
            text.push(c);
            continue;
        }
        let random_letter = |rng: &mut R| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char;
        match rng.gen_range(0..3) {
            0 => {
                let mut r = random_letter(rng);
                while r == c {
                    r = random_letter(rng);
                }
                text.push(r);
                edits.push(NoiseEdit { position: i, kind: EditKind::Substitute });
            }
            1 => edits.push(NoiseEdit { position: i, kind: EditKind::Delete }),
            _ => {
                text.push(random_letter(rng));
                text.push(c);
                edits.push(NoiseEdit { position: i, kind: EditKind::Insert });
            }
        }
    }
    Perturbation { text, edits }
}

/// Wraps a backend and corrupts its output with seeded character noise.
/// The noise stream depends only on the seed and the request id, so results
/// do not depend on scheduling.
pub struct PerturbingBackend<B> {
    inner: B,
    rate: f64,
    seed: u64,
    strategy: Strategy,
}

impl<B: Backend> PerturbingBackend<B> {
    pub fn new(inner: B, rate: f64, seed: u64, strategy: Strategy) -> Self {
        PerturbingBackend { inner, rate, seed, strategy }
    }
}

impl<B: Backend> Backend for PerturbingBackend<B> {
    fn name(&self) -> &str {
        "perturbed"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let clean = self.inner.generate(request)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(request.id);
        Ok(perturb_payload(&clean, self.rate, self.strategy, &mut rng).text)
    }
}
