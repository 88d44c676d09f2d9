//! Chat-completion backends, call accounting and transcripts.
//!
//! Every model call goes through [`ModelClient`], which forwards the request
//! to a [`ChatBackend`], appends one [`LedgerEntry`] and, when configured,
//! one transcript line. Transcripts are JSONL and load straight back into a
//! [`ReplayBackend`], so a recorded run can be replayed offline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the API credential for the HTTP backend.
pub const API_KEY_ENV: &str = "TABLEGEN_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {cause}")]
    BackendUnavailable { attempts: u32, cause: String },
    #[error("request exceeds the model context window: {0}")]
    ContextOverflow(String),
    #[error("no scripted response for request fingerprint {0}")]
    MissingScript(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    InvalidResponse(String),
    #[error("transcript I/O failed: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed transcript line {line_no}: {cause}")]
    MalformedTranscript { line_no: usize, cause: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
}

impl ChatRequest {
    /// SHA-256 over the canonical JSON of (model, messages, temperature).
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(&FingerprintInput {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
        })
        .expect("fingerprint input is always serializable");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub fingerprint: String,
    pub example_id: String,
    pub stage_label: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub calls: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
}

impl LedgerTotals {
    fn add(mut self, e: &LedgerEntry) -> Self {
        self.calls += 1;
        self.tokens_in += e.tokens_in;
        self.tokens_out += e.tokens_out;
        self.latency_ms += e.latency_ms;
        self
    }
}

/// Append-only record of completed model calls. Safe to share across threads.
#[derive(Debug, Default)]
pub struct CallLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger lock poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn totals(&self) -> LedgerTotals {
        self.entries
            .lock()
            .expect("ledger lock poisoned")
            .iter()
            .fold(LedgerTotals::default(), LedgerTotals::add)
    }

    pub fn totals_where(&self, mut keep: impl FnMut(&LedgerEntry) -> bool) -> LedgerTotals {
        self.entries
            .lock()
            .expect("ledger lock poisoned")
            .iter()
            .filter(|e| keep(e))
            .fold(LedgerTotals::default(), LedgerTotals::add)
    }

    pub fn count_stage(&self, stage_label: &str) -> usize {
        self.totals_where(|e| e.stage_label == stage_label).calls as usize
    }
}

/// One transcript JSONL line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub fingerprint: String,
    pub stage_label: String,
    pub example_id: String,
    pub prompt_messages: Vec<Message>,
    pub response_text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
}

/// Appends transcript lines to a file. Each line is written with a single
/// `write_all` under a lock so concurrent callers never interleave.
#[derive(Debug)]
pub struct TranscriptSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl TranscriptSink {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(TranscriptSink { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, line: &TranscriptLine) -> Result<(), BackendError> {
        let mut buf = serde_json::to_vec(line).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        buf.push(b'\n');
        let mut file = self.file.lock().expect("transcript lock poisoned");
        file.write_all(&buf)?;
        file.flush()?;
        Ok(())
    }
}

/// Appends one call to the transcript at `path`, opening it in append mode.
pub fn record_transcript(
    request: &ChatRequest,
    response: &ChatResponse,
    example_id: &str,
    stage_label: &str,
    path: &Path,
) -> Result<(), BackendError> {
    TranscriptSink::open(path)?.append(&TranscriptLine {
        fingerprint: request.fingerprint(),
        stage_label: stage_label.to_string(),
        example_id: example_id.to_string(),
        prompt_messages: request.messages.clone(),
        response_text: response.text.clone(),
        tokens_in: response.tokens_in,
        tokens_out: response.tokens_out,
        latency_ms: response.latency_ms,
    })
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptLine>, BackendError> {
    let text = std::fs::read_to_string(path)?;
    parse_transcript(&text)
}

pub fn parse_transcript(text: &str) -> Result<Vec<TranscriptLine>, BackendError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BackendError::MalformedTranscript {
                line_no: i + 1,
                cause: e.to_string(),
            })
        })
        .collect()
}

/// Answers requests from recorded responses keyed by fingerprint. The first
/// recording of a fingerprint wins.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    script: HashMap<String, ChatResponse>,
}

impl ReplayBackend {
    pub fn new(script: HashMap<String, ChatResponse>) -> Self {
        ReplayBackend { script }
    }

    pub fn from_lines(lines: impl IntoIterator<Item = TranscriptLine>) -> Self {
        let mut script = HashMap::new();
        for line in lines {
            script.entry(line.fingerprint).or_insert(ChatResponse {
                text: line.response_text,
                tokens_in: line.tokens_in,
                tokens_out: line.tokens_out,
                latency_ms: line.latency_ms,
            });
        }
        ReplayBackend { script }
    }

    pub fn from_transcript(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::from_lines(read_transcript(path)?))
    }

    /// Scripts a response for a request; token counts are whitespace counts.
    pub fn insert(&mut self, request: &ChatRequest, text: impl Into<String>) {
        let text = text.into();
        self.script.insert(
            request.fingerprint(),
            ChatResponse {
                tokens_in: prompt_word_count(&request.messages),
                tokens_out: text.split_whitespace().count() as u64,
                text,
                latency_ms: 0,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let fp = request.fingerprint();
        self.script.get(&fp).cloned().ok_or(BackendError::MissingScript(fp))
    }
}

fn prompt_word_count(messages: &[Message]) -> u64 {
    messages.iter().map(|m| m.content.split_whitespace().count() as u64).sum()
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure; used for tests and for recording fixtures.
/// Token counts are whitespace word counts and latency is zero, so runs
/// are fully deterministic.
pub struct ScriptedBackend {
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn new(responder: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        ScriptedBackend { responder: Box::new(responder) }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = (self.responder)(request)?;
        Ok(ChatResponse {
            tokens_in: prompt_word_count(&request.messages),
            tokens_out: text.split_whitespace().count() as u64,
            text,
            latency_ms: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 4, base_delay_ms: 500, max_delay_ms: 16_000 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    stream: bool,
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// `endpoint` is the full URL of the chat-completions route, e.g.
    /// `http://localhost:8000/v1/chat/completions`.
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::BackendUnavailable { attempts: 0, cause: e.to_string() })?;
        Ok(HttpBackend { endpoint: endpoint.into(), api_key, retry: RetryPolicy::default(), client })
    }

    /// Reads the credential from [`API_KEY_ENV`] when set.
    pub fn from_env(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        Self::new(endpoint, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()), timeout)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<serde_json::Value, Attempt> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if status == 429 || (500..600).contains(&status) {
            return Err(Attempt::Transient(format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            if is_context_overflow(&text) {
                return Err(Attempt::Fatal(BackendError::ContextOverflow(text)));
            }
            return Err(Attempt::Fatal(BackendError::Http { status, body: text }));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(BackendError::InvalidResponse(e.to_string())))
    }
}

enum Attempt {
    Transient(String),
    Fatal(BackendError),
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    ["context_length_exceeded", "maximum context length", "context length", "token limit", "too many tokens"]
        .iter()
        .any(|marker| lower.contains(marker))
}

fn parse_completion(value: &serde_json::Value, latency_ms: u64) -> Result<ChatResponse, BackendError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::InvalidResponse("no choices in response".into()))?;
    if choice.get("finish_reason").and_then(|f| f.as_str()) == Some("length")
        && choice.pointer("/message/content").is_none_or(|c| c.is_null())
    {
        return Err(BackendError::ContextOverflow("completion truncated at the token limit".into()));
    }
    let text = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| BackendError::InvalidResponse("first choice has no message content".into()))?
        .to_string();
    let usage = |field: &str| value.pointer(&format!("/usage/{field}")).and_then(|v| v.as_u64()).unwrap_or(0);
    Ok(ChatResponse {
        text,
        tokens_in: usage("prompt_tokens"),
        tokens_out: usage("completion_tokens"),
        latency_ms,
    })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
            stream: false,
        };
        let mut attempt = 0;
        loop {
            let started = Instant::now();
            match self.attempt(&body) {
                Ok(value) => return parse_completion(&value, started.elapsed().as_millis() as u64),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(cause)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(BackendError::BackendUnavailable { attempts: attempt + 1, cause });
                    }
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

/// Who is calling: attached to every ledger entry and transcript line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub example_id: String,
    pub stage_label: String,
}

impl CallContext {
    pub fn new(example_id: impl Into<String>, stage_label: impl Into<String>) -> Self {
        CallContext { example_id: example_id.into(), stage_label: stage_label.into() }
    }

    pub fn with_stage(&self, stage_label: impl Into<String>) -> Self {
        CallContext { example_id: self.example_id.clone(), stage_label: stage_label.into() }
    }
}

#[derive(Debug, Clone)]
pub struct CallSettings {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for CallSettings {
    fn default() -> Self {
        CallSettings { model: "default".into(), temperature: 0.0, max_output_tokens: 2048 }
    }
}

/// The single entry point for model calls: backend plus accounting.
#[derive(Clone)]
pub struct ModelClient {
    backend: Arc<dyn ChatBackend>,
    ledger: Arc<CallLedger>,
    transcript: Option<Arc<TranscriptSink>>,
    settings: CallSettings,
}

impl ModelClient {
    pub fn new(backend: Arc<dyn ChatBackend>, settings: CallSettings) -> Self {
        ModelClient { backend, ledger: Arc::new(CallLedger::new()), transcript: None, settings }
    }

    pub fn with_ledger(mut self, ledger: Arc<CallLedger>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn with_transcript(mut self, sink: Arc<TranscriptSink>) -> Self {
        self.transcript = Some(sink);
        self
    }

    pub fn ledger(&self) -> &Arc<CallLedger> {
        &self.ledger
    }

    pub fn settings(&self) -> &CallSettings {
        &self.settings
    }

    pub fn request(&self, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model: self.settings.model.clone(),
            messages,
            temperature: self.settings.temperature,
            max_output_tokens: self.settings.max_output_tokens,
        }
    }

    /// Issues one call. A ledger entry is written only for completed calls.
    pub fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<ChatResponse, BackendError> {
        if request.messages.is_empty() {
            return Err(BackendError::InvalidResponse("request has no messages".into()));
        }
        let response = self.backend.complete(request)?;
        let fingerprint = request.fingerprint();
        if let Some(sink) = &self.transcript {
            sink.append(&TranscriptLine {
                fingerprint: fingerprint.clone(),
                stage_label: ctx.stage_label.clone(),
                example_id: ctx.example_id.clone(),
                prompt_messages: request.messages.clone(),
                response_text: response.text.clone(),
                tokens_in: response.tokens_in,
                tokens_out: response.tokens_out,
                latency_ms: response.latency_ms,
            })?;
        }
        self.ledger.record(LedgerEntry {
            fingerprint,
            example_id: ctx.example_id.clone(),
            stage_label: ctx.stage_label.clone(),
            tokens_in: response.tokens_in,
            tokens_out: response.tokens_out,
            latency_ms: response.latency_ms,
        });
        Ok(response)
    }

    pub fn chat(&self, messages: Vec<Message>, ctx: &CallContext) -> Result<ChatResponse, BackendError> {
        self.complete(&self.request(messages), ctx)
    }
}
