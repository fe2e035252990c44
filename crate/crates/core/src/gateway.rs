//! Chat-completion client for OpenAI-compatible servers, and a deterministic
//! mock backend for offline runs.
//!
//! The client is blocking; concurrency comes from [`complete_batch`], which
//! keeps at most `max_in_flight` requests outstanding and returns results in
//! submission order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hashing::{fnv1a64, SplitMix64};

/// Bearer token for the HTTP backends.
pub const API_KEY_ENV: &str = "PUSHFORGE_API_KEY";

/// Last line of every classification prompt.
pub const CLASSIFY_SUFFIX: &str = "Answer with exactly one category name.";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 200, backoff_factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Wait after the `attempt`-th failure (1-based): `base * factor^(attempt-1)`.
    /// No jitter.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1) as i32;
        let ms = self.backoff_base_ms as f64 * self.backoff_factor.powi(exp);
        Duration::from_secs_f64((ms / 1000.0).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_name: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model_name: "push-writer".into(),
            timeout_ms: 30_000,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::Config("retry.max_attempts must be >= 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(GatewayError::Config("timeout_ms must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be > 0".into()));
        }
        if self.endpoint.is_empty() {
            return Err(GatewayError::Config("endpoint is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// Field order here is the wire order and feeds the mock's request hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(rename = "model")]
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn last_user_content(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
}

/// Anything that can answer a chat request.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// Upper bound on concurrently outstanding requests.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn model_name(&self) -> &str;
}

/// Blocking JSON-over-HTTP transport with retry on transient failures.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    cfg: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(cfg.timeout_ms)).build();
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Self { cfg, agent, api_key })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.endpoint.trim_end_matches('/'), path.trim_start_matches('/'))
    }

    /// POSTs `body` to `{endpoint}/{path}` and parses the JSON reply.
    /// Connection failures and 5xx are retried; 4xx never are.
    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(path);
        let max = self.cfg.retry.max_attempts;
        let mut last = String::new();
        for attempt in 1..=max {
            let mut req = self.agent.post(&url).set("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(resp) => {
                    let text =
                        resp.into_string().map_err(|e| GatewayError::Protocol(format!("unreadable body: {e}")))?;
                    return serde_json::from_str(&text)
                        .map_err(|e| GatewayError::Protocol(format!("body is not JSON: {e}")));
                }
                Err(ureq::Error::Status(code, resp)) if (400..500).contains(&code) => {
                    let body = resp.into_string().unwrap_or_default();
                    return Err(GatewayError::Request { status: code, body });
                }
                Err(ureq::Error::Status(code, _)) => {
                    last = format!("HTTP {code}");
                }
                Err(ureq::Error::Transport(t)) => {
                    last = t.to_string();
                }
            }
            log::debug!("attempt {attempt}/{max} to {url} failed: {last}");
            if attempt < max {
                std::thread::sleep(self.cfg.retry.delay(attempt));
            }
        }
        Err(GatewayError::Unavailable { attempts: max, message: last })
    }
}

/// An OpenAI-compatible `/chat/completions` backend.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    transport: HttpTransport,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, GatewayError> {
        Ok(Self { transport: HttpTransport::new(cfg)? })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let mut body = serde_json::to_value(req).expect("request serializes");
        if req.model_name.is_empty() {
            body["model"] = Value::String(self.transport.cfg.model_name.clone());
        }
        let reply = self.transport.post_json("chat/completions", &body)?;
        parse_chat_reply(&reply)
    }

    fn max_in_flight(&self) -> usize {
        self.transport.cfg.max_in_flight
    }

    fn model_name(&self) -> &str {
        &self.transport.cfg.model_name
    }
}

fn parse_chat_reply(reply: &Value) -> Result<ChatResponse, GatewayError> {
    let choice = reply
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("missing choices[0]".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))?;
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("unknown");
    Ok(ChatResponse { content: content.to_string(), finish_reason: finish_reason.to_string() })
}

/// One-shot completion against an HTTP backend.
pub fn complete(cfg: &BackendConfig, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
    HttpBackend::new(cfg.clone())?.complete(req)
}

/// Offline backend; see [`mock_complete`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub seed: u64,
    pub max_in_flight: usize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, max_in_flight: 4 }
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        Ok(mock_complete(self.seed, req))
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn model_name(&self) -> &str {
        "mock"
    }
}

const MOCK_OPENERS: [&str; 8] = [
    "Don't miss this",
    "You won't believe it",
    "Just in",
    "Everyone is talking about it",
    "Here's why it matters",
    "Wait for the ending",
    "This changes everything",
    "Take a look",
];

const MOCK_CLOSERS: [&str; 6] =
    ["Tap to watch.", "See it now.", "Find out more.", "Watch before it's gone.", "Open to see.", "Check it out."];

/// Deterministic completion. The stream is splitmix64 seeded with
/// `fnv1a64(json(req)) ^ seed`.
///
/// Classification prompts (ending in [`CLASSIFY_SUFFIX`]) get one of the
/// `- Name: ...` categories listed in the prompt. Generation prompts (with a
/// `### STYLE` block) get a templated push carrying `[Category]` and the
/// start of the `### CONTENT` block.
pub fn mock_complete(seed: u64, req: &ChatRequest) -> ChatResponse {
    let bytes = serde_json::to_vec(req).expect("request serializes");
    let mut stream = SplitMix64::new(fnv1a64(&bytes) ^ seed);
    let prompt = req.last_user_content();
    let content = if prompt.trim_end().ends_with(CLASSIFY_SUFFIX) {
        let names = listed_categories(prompt);
        if names.is_empty() {
            "Other".to_string()
        } else {
            names[stream.next_index(names.len())].to_string()
        }
    } else if let Some(style) = block_after(prompt, "### STYLE") {
        let content = block_after(prompt, "### CONTENT").unwrap_or_default();
        let excerpt: Vec<&str> = content.split_whitespace().take(8).collect();
        let opener = MOCK_OPENERS[stream.next_index(MOCK_OPENERS.len())];
        let closer = MOCK_CLOSERS[stream.next_index(MOCK_CLOSERS.len())];
        let tag = stream.next_u64() & 0xffff;
        format!("[{}] {opener}: {} {closer} #{tag:04x}", style.trim(), excerpt.join(" "))
    } else {
        format!("mock completion {:016x}", stream.next_u64())
    };
    ChatResponse { content, finish_reason: "stop".into() }
}

fn listed_categories(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split(':').next())
        .map(str::trim)
        .filter(|n| !n.is_empty())
        .collect()
}

/// The text between a `### NAME` header line and the next header.
fn block_after(prompt: &str, header: &str) -> Option<String> {
    let mut lines = prompt.lines().skip_while(|l| l.trim_end() != header);
    lines.next()?;
    let body: Vec<&str> = lines.take_while(|l| !l.starts_with("### ")).collect();
    Some(body.join("\n").trim().to_string())
}

/// Issues every request with at most `backend.max_in_flight()` outstanding.
/// The i-th result corresponds to the i-th request.
pub fn complete_batch(
    backend: &dyn CompletionBackend,
    requests: &[ChatRequest],
) -> Vec<Result<ChatResponse, GatewayError>> {
    let workers = backend.max_in_flight().max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| backend.complete(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ChatResponse, GatewayError>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let result = backend.complete(req);
                slots.lock().expect("slot lock")[i] = Some(result);
            });
        }
    });
    slots.into_inner().expect("slot lock").into_iter().map(|r| r.expect("every request answered")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(prompt: &str) -> ChatRequest {
        ChatRequest {
            model_name: "m".into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.8,
            top_p: 0.9,
            repetition_penalty: 1.1,
            max_tokens: 64,
            seed: None,
        }
    }

    #[test]
    fn retry_schedule_is_geometric() {
        let p = RetryPolicy { max_attempts: 4, backoff_base_ms: 100, backoff_factor: 2.0 };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(400));
    }

    #[test]
    fn request_wire_shape() {
        let v = serde_json::to_value(request("hi")).unwrap();
        assert_eq!(v["model"], "m");
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"], "hi");
        assert_eq!(v["top_p"], 0.9);
        assert!(v.get("seed").is_none());
    }

    #[test]
    fn request_validation() {
        let mut r = request("x");
        r.top_p = 0.0;
        assert!(r.validate().is_err());
        let mut r = request("x");
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = request("x");
        r.temperature = -0.1;
        assert!(r.validate().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.retry.max_attempts = 0;
        assert!(c.validate().is_err());
        let c = BackendConfig { timeout_ms: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn mock_is_deterministic() {
        let r = request("say something");
        assert_eq!(mock_complete(5, &r), mock_complete(5, &r));
    }

    #[test]
    fn mock_seed_changes_output() {
        let r = request("say something");
        assert_ne!(mock_complete(1, &r).content, mock_complete(2, &r).content);
        let g = request("### TASK\nWrite.\n### STYLE\nPlot\n### CONTENT\nA dog surfs a wave");
        assert_ne!(mock_complete(1, &g).content, mock_complete(2, &g).content);
    }

    #[test]
    fn mock_echoes_style_marker() {
        let r = request("### TASK\nWrite a push.\n### STYLE\nSuspense\n### CONTENT\nA cat opens a door");
        let out = mock_complete(9, &r).content;
        assert!(out.contains("Suspense"), "{out}");
        assert!(out.contains("A cat opens a door"), "{out}");
    }

    #[test]
    fn mock_classifies_into_listed_categories() {
        let prompt = format!("Pick one.\n- Alpha: first\n- Beta: second\nText\n{CLASSIFY_SUFFIX}");
        for seed in 0..20 {
            let out = mock_complete(seed, &request(&prompt)).content;
            assert!(out == "Alpha" || out == "Beta", "{out}");
        }
    }

    #[test]
    fn chat_reply_parsing() {
        let ok = serde_json::json!({"choices":[{"message":{"content":"hello"},"finish_reason":"stop"}]});
        assert_eq!(parse_chat_reply(&ok).unwrap().content, "hello");
        let bad = serde_json::json!({"choices":[]});
        assert!(matches!(parse_chat_reply(&bad), Err(GatewayError::Protocol(_))));
    }

    #[test]
    fn batch_preserves_order() {
        let backend = MockBackend::new(3);
        let reqs: Vec<ChatRequest> = (0..10).map(|i| request(&format!("p{i}"))).collect();
        let got = complete_batch(&backend, &reqs);
        for (r, g) in reqs.iter().zip(got) {
            assert_eq!(g.unwrap(), mock_complete(3, r));
        }
    }
}
