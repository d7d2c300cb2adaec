//! Language-model service access.
//!
//! [`Backend`] is the raw service: greedy completion of a rendered prompt and
//! log-probability of a continuation. [`BackendClient`] wraps a backend with
//! chat templating, a context-budget pre-flight check, retries with
//! exponential backoff, a global in-flight cap and event logging. Only text,
//! log-probabilities and [`BackendError`]s leave this module.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::domain::{CONSONANTS, VOWELS};
use crate::error::{BackendError, PersistError};
use crate::prompts::Prompt;

pub const DEFAULT_CONTEXT_BUDGET: usize = 8_192;
pub const COMPLETION_STOPS: [&str; 2] = ["\n", "'}"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Echo the prefilled prompt through `/completions` with `logprobs` and
    /// sum the log-probabilities of the continuation tokens.
    #[default]
    Echo,
    /// POST `{prompt, continuation}` to `/score`, which returns
    /// `{"logprob": f64, "tokens": n}`.
    ScoreEndpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendDescriptor {
    /// Base URL of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub backoff_base_ms: u64,
    /// Fixed at 0 for greedy decoding.
    pub temperature: f64,
    pub max_tokens: usize,
    pub context_budget: usize,
    /// Environment variable holding the API key, if the service needs one.
    pub api_key_env: Option<String>,
    pub score_mode: ScoreMode,
    /// Chat template file; plain concatenation when absent.
    pub template: Option<PathBuf>,
    pub max_in_flight: usize,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "meta-llama/Meta-Llama-3-70B-Instruct".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_base_ms: 500,
            temperature: 0.0,
            max_tokens: 16,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            api_key_env: None,
            score_mode: ScoreMode::Echo,
            template: None,
            max_in_flight: 4,
        }
    }
}

impl BackendDescriptor {
    /// Reads the credential named by `api_key_env`.
    pub fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                BackendError::InvalidRequest(format!("environment variable {var} is not set"))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprob: f64,
    pub tokens: usize,
}

/// A language-model service.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    /// Greedy continuation of `text`.
    fn complete(&self, text: &str) -> Result<String, BackendError>;
    /// Total log-probability of `continuation` following `text`.
    fn score(&self, text: &str, continuation: &str) -> Result<ScoreResponse, BackendError>;
}

/// Control tokens wrapped around the prompt parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatTemplate {
    pub name: String,
    pub begin: String,
    pub system_prefix: String,
    pub system_suffix: String,
    pub user_prefix: String,
    pub user_suffix: String,
    pub assistant_prefix: String,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self::plain()
    }
}

impl ChatTemplate {
    /// System text, a blank line, then the vocabulary and stem.
    pub fn plain() -> Self {
        Self {
            name: "plain".into(),
            begin: String::new(),
            system_prefix: String::new(),
            system_suffix: "\n\n".into(),
            user_prefix: String::new(),
            user_suffix: String::new(),
            assistant_prefix: String::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let text = std::fs::read_to_string(path).map_err(|e| PersistError::io(path, e))?;
        toml::from_str(&text).map_err(|e| PersistError::parse(path, e.to_string()))
    }

    /// Text sent to the service, ending where the model starts writing.
    pub fn render(&self, prompt: &Prompt) -> String {
        format!(
            "{}{}{}{}{}{}{}{}",
            self.begin,
            self.system_prefix,
            prompt.system_instruction,
            self.system_suffix,
            self.user_prefix,
            prompt.body(),
            self.user_suffix,
            self.assistant_prefix
        )
    }
}

/// Conservative token estimate when no tokenizer is available.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub fn prompt_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Where a backend call originates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub simulation: String,
    pub block: String,
    pub round: Option<usize>,
    pub task: String,
    pub agent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: String,
    pub simulation: String,
    pub block: String,
    pub round: Option<usize>,
    pub task: String,
    pub agent: String,
    /// `complete`, `score` or `oracle`.
    pub kind: String,
    pub attempt: usize,
    pub prompt_hash: Option<String>,
    pub prompt: Option<String>,
    pub continuation: Option<String>,
    pub raw_response: Option<String>,
    pub parsed: Option<String>,
    pub logprob: Option<f64>,
    pub error: Option<String>,
    pub latency_ms: f64,
}

impl Event {
    pub fn new(site: &CallSite, kind: &str) -> Self {
        Self {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            simulation: site.simulation.clone(),
            block: site.block.clone(),
            round: site.round,
            task: site.task.clone(),
            agent: site.agent.clone(),
            kind: kind.into(),
            attempt: 0,
            prompt_hash: None,
            prompt: None,
            continuation: None,
            raw_response: None,
            parsed: None,
            logprob: None,
            error: None,
            latency_ms: 0.0,
        }
    }
}

/// Append-only call log, optionally mirrored to a JSON-lines file.
#[derive(Clone, Default)]
pub struct EventLog {
    inner: Arc<Mutex<EventLogInner>>,
}

#[derive(Default)]
struct EventLogInner {
    events: Vec<Event>,
    sink: Option<BufWriter<File>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> Result<Self, PersistError> {
        let file = File::create(path).map_err(|e| PersistError::io(path, e))?;
        let log = Self::default();
        log.inner.lock().expect("event log poisoned").sink = Some(BufWriter::new(file));
        Ok(log)
    }

    pub fn append(&self, event: Event) {
        let mut inner = self.inner.lock().expect("event log poisoned");
        if let Some(sink) = inner.sink.as_mut() {
            let line = serde_json::to_string(&event).expect("event serializes");
            if let Err(e) = writeln!(sink, "{line}") {
                log::error!("event log write failed: {e}");
            }
        }
        inner.events.push(event);
    }

    pub fn events(&self) -> Vec<Event> {
        self.inner.lock().expect("event log poisoned").events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("event log poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) -> std::io::Result<()> {
        match self.inner.lock().expect("event log poisoned").sink.as_mut() {
            Some(sink) => sink.flush(),
            None => Ok(()),
        }
    }
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("limiter poisoned");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Templating, budget checks, retries and logging around a [`Backend`].
/// Safe to share across simulations.
pub struct BackendClient {
    backend: Arc<dyn Backend>,
    descriptor: BackendDescriptor,
    template: ChatTemplate,
    limiter: InFlight,
}

impl BackendClient {
    pub fn new(backend: Arc<dyn Backend>, descriptor: BackendDescriptor, template: ChatTemplate) -> Self {
        let limiter = InFlight::new(descriptor.max_in_flight);
        Self { backend, descriptor, template, limiter }
    }

    /// Client with default settings and the plain template.
    pub fn scripted(backend: ScriptedBackend) -> Self {
        let descriptor = BackendDescriptor { backoff_base_ms: 0, ..Default::default() };
        Self::new(Arc::new(backend), descriptor, ChatTemplate::plain())
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn template(&self) -> &ChatTemplate {
        &self.template
    }

    pub fn render(&self, prompt: &Prompt) -> String {
        self.template.render(prompt)
    }

    fn check_budget(&self, text: &str) -> Result<(), BackendError> {
        let estimated = estimate_tokens(text);
        if estimated > self.descriptor.context_budget {
            return Err(BackendError::ContextOverflow {
                estimated,
                budget: self.descriptor.context_budget,
            });
        }
        Ok(())
    }

    fn with_retries<T>(
        &self,
        site: &CallSite,
        kind: &str,
        text: &str,
        continuation: Option<&str>,
        log: &EventLog,
        mut call: impl FnMut() -> Result<T, BackendError>,
        mut describe: impl FnMut(&T, &mut Event),
    ) -> Result<T, BackendError> {
        let hash = prompt_hash(text);
        let mut attempt = 0;
        loop {
            let started = Instant::now();
            let result = {
                let _permit = self.limiter.acquire();
                call()
            };
            let mut event = Event::new(site, kind);
            event.attempt = attempt;
            event.prompt_hash = Some(hash.clone());
            event.prompt = Some(text.to_string());
            event.continuation = continuation.map(str::to_string);
            event.latency_ms = started.elapsed().as_secs_f64() * 1e3;
            match &result {
                Ok(value) => describe(value, &mut event),
                Err(e) => event.error = Some(e.to_string()),
            }
            log.append(event);
            match result {
                Err(e) if e.is_transient() && attempt < self.descriptor.max_retries => {
                    let delay = self.descriptor.backoff_base_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("{kind} attempt {attempt} failed ({e}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn complete(&self, prompt: &Prompt, site: &CallSite, log: &EventLog) -> Result<String, BackendError> {
        let text = self.render(prompt);
        if prompt.body().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if let Err(e) = self.check_budget(&text) {
            let mut event = Event::new(site, "complete");
            event.prompt_hash = Some(prompt_hash(&text));
            event.error = Some(e.to_string());
            log.append(event);
            return Err(e);
        }
        self.with_retries(site, "complete", &text, None, log, || self.backend.complete(&text), |raw, ev| {
            ev.raw_response = Some(raw.clone());
        })
    }

    /// Log-probability of `prompt.continuation`.
    pub fn score(&self, prompt: &Prompt, site: &CallSite, log: &EventLog) -> Result<f64, BackendError> {
        let continuation = prompt
            .continuation
            .as_deref()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| BackendError::InvalidRequest("score needs a non-empty continuation".into()))?;
        let text = self.render(prompt);
        if let Err(e) = self.check_budget(&format!("{text}{continuation}")) {
            let mut event = Event::new(site, "score");
            event.prompt_hash = Some(prompt_hash(&text));
            event.error = Some(e.to_string());
            log.append(event);
            return Err(e);
        }
        let response = self.with_retries(
            site,
            "score",
            &text,
            Some(continuation),
            log,
            || {
                let r = self.backend.score(&text, continuation)?;
                if r.logprob > 0.0 || r.logprob.is_nan() {
                    return Err(BackendError::MalformedServiceReply(format!(
                        "log-probability {} is not <= 0",
                        r.logprob
                    )));
                }
                Ok(r)
            },
            |r, ev| ev.logprob = Some(r.logprob),
        )?;
        Ok(response.logprob)
    }
}

/// Deterministic in-process backend for tests and offline runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedSpec {
    /// Exact rendered prompt → completion.
    pub completions: BTreeMap<String, String>,
    pub default_completion: Option<String>,
    /// Derive a CV word from a hash of the prompt when nothing else matches.
    pub hashed_completions: bool,
    /// Continuation text → log-probability.
    pub scores: BTreeMap<String, f64>,
    pub default_score: Option<f64>,
    /// Derive a log-probability from a hash of prompt and continuation.
    pub hashed_scores: bool,
    pub scoring_unsupported: bool,
    /// Number of initial calls that fail with a transport error.
    pub transient_failures: usize,
}

pub struct ScriptedBackend {
    spec: ScriptedSpec,
    failures_left: AtomicUsize,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(spec: ScriptedSpec) -> Self {
        let failures_left = AtomicUsize::new(spec.transient_failures);
        Self { spec, failures_left, calls: AtomicUsize::new(0) }
    }

    pub fn constant(word: &str) -> Self {
        Self::new(ScriptedSpec { default_completion: Some(word.into()), default_score: Some(-1.0), ..Default::default() })
    }

    /// Hash-driven completions and scores: varied but fully deterministic.
    pub fn hashed() -> Self {
        Self::new(ScriptedSpec { hashed_completions: true, hashed_scores: true, ..Default::default() })
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let text = std::fs::read_to_string(path).map_err(|e| PersistError::io(path, e))?;
        let spec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| PersistError::parse(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| PersistError::parse(path, e.to_string()))?
        };
        Ok(Self::new(spec))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn inject_failure(&self) -> Result<(), BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let took = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if took {
            return Err(BackendError::TransportFailure("scripted transient failure".into()));
        }
        Ok(())
    }
}

fn hash_bytes(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().into()
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, text: &str) -> Result<String, BackendError> {
        self.inject_failure()?;
        if let Some(reply) = self.spec.completions.get(text) {
            return Ok(reply.clone());
        }
        if let Some(reply) = &self.spec.default_completion {
            return Ok(reply.clone());
        }
        if self.spec.hashed_completions {
            let h = hash_bytes(&[text]);
            let syllables = 2 + (h[0] % 3) as usize;
            let mut word = String::new();
            for i in 0..syllables {
                word.push(CONSONANTS[h[1 + 2 * i] as usize % CONSONANTS.len()]);
                word.push(VOWELS[h[2 + 2 * i] as usize % VOWELS.len()]);
            }
            word.push_str("'}");
            return Ok(word);
        }
        Err(BackendError::MalformedServiceReply("no scripted completion for prompt".into()))
    }

    fn score(&self, text: &str, continuation: &str) -> Result<ScoreResponse, BackendError> {
        self.inject_failure()?;
        if self.spec.scoring_unsupported {
            return Err(BackendError::CapabilityUnsupported("return token log-probabilities".into()));
        }
        let tokens = estimate_tokens(continuation).max(1);
        let logprob = if let Some(v) = self.spec.scores.get(continuation) {
            *v
        } else if let Some(v) = self.spec.default_score {
            v
        } else if self.spec.hashed_scores {
            let h = hash_bytes(&[text, continuation]);
            -(f64::from(u16::from_le_bytes([h[0], h[1]]) % 1000) / 100.0) - 0.01
        } else {
            return Err(BackendError::MalformedServiceReply("no scripted score for continuation".into()));
        };
        Ok(ScoreResponse { logprob, tokens })
    }
}

/// OpenAI-compatible `/completions` adapter.
pub struct HttpBackend {
    agent: ureq::Agent,
    descriptor: BackendDescriptor,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        if descriptor.temperature != 0.0 {
            log::warn!("temperature {} is not greedy decoding", descriptor.temperature);
        }
        let api_key = descriptor.api_key()?;
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(descriptor.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(Self { agent: config.into(), descriptor, api_key })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.descriptor.endpoint.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut request = self.agent.post(&self.url(path)).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout(self.descriptor.timeout_secs),
            other => BackendError::TransportFailure(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::TransportFailure(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| BackendError::MalformedServiceReply(format!("{e}: {text}"))),
            429 | 500..=599 => Err(BackendError::TransportFailure(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::InvalidRequest(format!("HTTP {status}: {text}"))),
        }
    }

    fn first_choice(reply: &Value) -> Result<&Value, BackendError> {
        reply
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| BackendError::MalformedServiceReply("reply has no choices".into()))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, text: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.descriptor.model,
            "prompt": text,
            "max_tokens": self.descriptor.max_tokens,
            "temperature": self.descriptor.temperature,
            "stop": COMPLETION_STOPS,
        });
        let reply = self.post("completions", &body)?;
        Self::first_choice(&reply)?
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::MalformedServiceReply("choice has no text".into()))
    }

    fn score(&self, text: &str, continuation: &str) -> Result<ScoreResponse, BackendError> {
        match self.descriptor.score_mode {
            ScoreMode::ScoreEndpoint => {
                let body = json!({
                    "model": self.descriptor.model,
                    "prompt": text,
                    "continuation": continuation,
                });
                let reply = self.post("score", &body)?;
                let logprob = reply.get("logprob").and_then(Value::as_f64).ok_or_else(|| {
                    BackendError::CapabilityUnsupported("return continuation log-probabilities".into())
                })?;
                let tokens = reply.get("tokens").and_then(Value::as_u64).unwrap_or(0) as usize;
                Ok(ScoreResponse { logprob, tokens })
            }
            ScoreMode::Echo => {
                let full = format!("{text}{continuation}");
                let body = json!({
                    "model": self.descriptor.model,
                    "prompt": full,
                    "max_tokens": 1,
                    "temperature": 0.0,
                    "echo": true,
                    "logprobs": 0,
                });
                let reply = self.post("completions", &body)?;
                let logprobs = Self::first_choice(&reply)?
                    .get("logprobs")
                    .filter(|v| !v.is_null())
                    .ok_or_else(|| {
                        BackendError::CapabilityUnsupported("echo prompt log-probabilities".into())
                    })?;
                echo_continuation_logprob(logprobs, text.chars().count(), full.chars().count())
            }
        }
    }
}

/// Sums token log-probabilities whose character offset falls inside the
/// continuation `[start, end)`.
fn echo_continuation_logprob(logprobs: &Value, start: usize, end: usize) -> Result<ScoreResponse, BackendError> {
    let malformed = |m: &str| BackendError::MalformedServiceReply(m.into());
    let values = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing token_logprobs"))?;
    let offsets = logprobs
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing text_offset"))?;
    if values.len() != offsets.len() {
        return Err(malformed("token_logprobs and text_offset differ in length"));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for (value, offset) in values.iter().zip(offsets) {
        let offset = offset.as_u64().ok_or_else(|| malformed("non-integer text_offset"))? as usize;
        if offset >= start && offset < end {
            total += value.as_f64().ok_or_else(|| malformed("null log-probability in continuation"))?;
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(malformed("no tokens inside the continuation"));
    }
    Ok(ScoreResponse { logprob: total, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptTask;

    fn prompt(body: &str, continuation: Option<&str>) -> Prompt {
        Prompt {
            task: PromptTask::Speaking,
            system_instruction: "sys".into(),
            vocabulary_lines: vec![],
            stem: body.into(),
            continuation: continuation.map(str::to_string),
        }
    }

    fn site() -> CallSite {
        CallSite { simulation: "t".into(), ..Default::default() }
    }

    #[test]
    fn scripted_table_lookup() {
        let p = prompt("{'shape':1,'colour':'green','amount':3,'word':'", None);
        let rendered = ChatTemplate::plain().render(&p);
        let spec = ScriptedSpec {
            completions: [(rendered, "hanosa".to_string())].into(),
            ..Default::default()
        };
        let client = BackendClient::scripted(ScriptedBackend::new(spec));
        let log = EventLog::new();
        assert_eq!(client.complete(&p, &site(), &log).unwrap(), "hanosa");
        assert_eq!(log.len(), 1);
        assert_eq!(log.events()[0].raw_response.as_deref(), Some("hanosa"));
    }

    #[test]
    fn budget_checked_before_any_call() {
        let backend = Arc::new(ScriptedBackend::constant("x"));
        let descriptor = BackendDescriptor { context_budget: 10, ..Default::default() };
        let client = BackendClient::new(backend.clone(), descriptor, ChatTemplate::plain());
        let err = client.complete(&prompt(&"a".repeat(100), None), &site(), &EventLog::new()).unwrap_err();
        assert!(matches!(err, BackendError::ContextOverflow { .. }));
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn transient_failure_is_retried_and_logged() {
        let backend = Arc::new(ScriptedBackend::new(ScriptedSpec {
            default_completion: Some("nafa".into()),
            transient_failures: 1,
            ..Default::default()
        }));
        let descriptor = BackendDescriptor { max_retries: 3, backoff_base_ms: 1, ..Default::default() };
        let client = BackendClient::new(backend.clone(), descriptor, ChatTemplate::plain());
        let log = EventLog::new();
        assert_eq!(client.complete(&prompt("x", None), &site(), &log).unwrap(), "nafa");
        let events = log.events();
        assert_eq!(events.len(), 2);
        assert!(events[0].error.is_some());
        assert_eq!(events[1].attempt, 1);
        assert_eq!(events.iter().filter(|e| e.attempt > 0).count(), 1);
    }

    #[test]
    fn retries_exhaust() {
        let backend = Arc::new(ScriptedBackend::new(ScriptedSpec {
            default_completion: Some("nafa".into()),
            transient_failures: 10,
            ..Default::default()
        }));
        let descriptor = BackendDescriptor { max_retries: 2, backoff_base_ms: 0, ..Default::default() };
        let client = BackendClient::new(backend.clone(), descriptor, ChatTemplate::plain());
        let err = client.complete(&prompt("x", None), &site(), &EventLog::new()).unwrap_err();
        assert!(matches!(err, BackendError::TransportFailure(_)));
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn scores_verbatim_and_stable() {
        let spec = ScriptedSpec {
            scores: [("a".to_string(), -1.5)].into(),
            hashed_scores: true,
            ..Default::default()
        };
        let client = BackendClient::scripted(ScriptedBackend::new(spec));
        let log = EventLog::new();
        assert_eq!(client.score(&prompt("x", Some("a")), &site(), &log).unwrap(), -1.5);
        let first = client.score(&prompt("x", Some("b")), &site(), &log).unwrap();
        let second = client.score(&prompt("x", Some("b")), &site(), &log).unwrap();
        assert_eq!(first, second);
        assert!(first <= 0.0);
        assert!(client.score(&prompt("x", None), &site(), &log).is_err());
    }

    #[test]
    fn positive_logprob_rejected() {
        let spec = ScriptedSpec { default_score: Some(0.5), ..Default::default() };
        let mut client = BackendClient::scripted(ScriptedBackend::new(spec));
        client.descriptor.max_retries = 0;
        let err = client.score(&prompt("x", Some("a")), &site(), &EventLog::new()).unwrap_err();
        assert!(matches!(err, BackendError::MalformedServiceReply(_)));
    }

    #[test]
    fn scoring_capability_error() {
        let spec = ScriptedSpec { scoring_unsupported: true, ..Default::default() };
        let client = BackendClient::scripted(ScriptedBackend::new(spec));
        let err = client.score(&prompt("x", Some("a")), &site(), &EventLog::new()).unwrap_err();
        assert!(matches!(err, BackendError::CapabilityUnsupported(_)));
    }

    #[test]
    fn template_wraps_parts() {
        let t = ChatTemplate {
            name: "t".into(),
            begin: "<B>".into(),
            system_prefix: "<S>".into(),
            system_suffix: "</S>".into(),
            user_prefix: "<U>".into(),
            user_suffix: "</U>".into(),
            assistant_prefix: "<A>".into(),
        };
        let mut p = prompt("stem", None);
        p.vocabulary_lines = vec!["l1".into()];
        assert_eq!(t.render(&p), "<B><S>sys</S><U>l1\nstem</U><A>");
        assert_eq!(ChatTemplate::plain().render(&p), "sys\n\nl1\nstem");
    }

    #[test]
    fn echo_sums_only_continuation_tokens() {
        let lp = json!({
            "tokens": ["ab", "c", "de", "f"],
            "token_logprobs": [null, -0.5, -1.0, -0.25],
            "text_offset": [0, 2, 3, 5]
        });
        let r = echo_continuation_logprob(&lp, 3, 6).unwrap();
        assert_eq!(r.logprob, -1.25);
        assert_eq!(r.tokens, 2);
        assert!(echo_continuation_logprob(&lp, 6, 6).is_err());
    }

    #[test]
    fn missing_credential_is_reported() {
        let d = BackendDescriptor {
            api_key_env: Some("LANGEVO_TEST_SURELY_UNSET_VAR".into()),
            ..Default::default()
        };
        assert!(matches!(HttpBackend::new(d), Err(BackendError::InvalidRequest(_))));
    }
}
