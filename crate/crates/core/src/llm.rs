//! Chat-completion access.
//!
//! Every provider call in the crate goes through [`LlmClient::complete`],
//! which owns retries, backoff, the overall deadline and the in-flight cap.
//! A [`Provider`] performs exactly one attempt. Two providers ship here: an
//! OpenAI-compatible HTTP provider and a scripted [`MockProvider`].

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Appended as a user message when structured output fails to parse.
pub const REASK_INSTRUCTION: &str =
    "Your previous reply did not follow the required output format. Reply strictly in the required format, with no other text.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

impl MessageRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub text: String,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: MessageRole::System, text: text.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { role: MessageRole::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: MessageRole::Assistant, text: text.into() }
    }
}

/// What a request is for. Never sent over the wire; lets test scripts and
/// logs tell the three call sites apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Chat,
    MemoryExtraction,
    PrivacyInference,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    #[serde(default)]
    pub purpose: Purpose,
}

impl CompletionRequest {
    pub fn new(purpose: Purpose, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            model_name: String::new(),
            temperature: 0.0,
            max_output_tokens: 1024,
            timeout: Duration::from_secs(60),
            purpose,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::InvalidRequest("messages must not be empty".into()));
        }
        if self.messages[1..].iter().any(|m| m.role == MessageRole::System) {
            return Err(Error::InvalidRequest("only the first message may be a system instruction".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the role-tagged message texts, lowercase hex.
    pub fn prompt_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(m.role.as_str());
            h.update([0u8]);
            h.update(&m.text);
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == MessageRole::System)
            .map(|m| m.text.as_str())
    }

    pub fn user_messages(&self) -> impl Iterator<Item = &ChatMessage> {
        self.messages.iter().filter(|m| m.role == MessageRole::User)
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, PartialEq)]
pub struct ProviderConfig {
    pub base_url: String,
    pub api_key: String,
    pub model_name: String,
    pub retry_limit: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl fmt::Debug for ProviderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .field("model_name", &self.model_name)
            .field("retry_limit", &self.retry_limit)
            .field("backoff_base", &self.backoff_base)
            .field("timeout", &self.timeout)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key: String::new(),
            model_name: "gpt-4o".into(),
            retry_limit: 2,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
        }
    }
}

/// Failure of a single attempt, as classified by a provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "message", rename_all = "snake_case")]
pub enum AttemptError {
    /// Worth retrying: connection reset, 5xx, rate limiting.
    Transient(String),
    Timeout,
    /// Credentials rejected; never retried.
    Auth(String),
    /// Request can never succeed; never retried.
    Fatal(String),
    /// The mock had nothing scripted for this request.
    Unmatched(String),
}

/// One attempt at a chat completion.
pub trait Provider: Send + Sync {
    fn attempt(&self, request: &CompletionRequest, timeout: Duration) -> Result<String, AttemptError>;
}

#[derive(Debug)]
struct Gate {
    in_use: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(cap: usize) -> Self {
        Self { in_use: Mutex::new(0), freed: Condvar::new(), cap: cap.max(1) }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().expect("gate poisoned");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("gate poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_use.lock().expect("gate poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Retrying, rate-capped front door to a [`Provider`].
#[derive(Clone)]
pub struct LlmClient {
    provider: Arc<dyn Provider>,
    config: ProviderConfig,
    gate: Arc<Gate>,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(provider: Arc<dyn Provider>, config: ProviderConfig) -> Self {
        let gate = Arc::new(Gate::new(config.max_in_flight));
        Self { provider, config, gate }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// A request preloaded with this client's model, timeout and temperature 0.
    pub fn request(&self, purpose: Purpose, messages: Vec<ChatMessage>) -> CompletionRequest {
        CompletionRequest {
            model_name: self.config.model_name.clone(),
            timeout: self.config.timeout,
            ..CompletionRequest::new(purpose, messages)
        }
    }

    /// Sends `request`, retrying transient failures up to `retry_limit` times
    /// with exponential backoff. The whole call finishes within
    /// `timeout * (retry_limit + 1)`.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String> {
        request.validate()?;
        let _permit = self.gate.acquire();
        let per_attempt = request.timeout;
        let budget = per_attempt.saturating_mul(self.config.retry_limit + 1);
        let deadline = Instant::now() + budget;
        let mut attempts = 0u32;
        let mut last_timeout = false;
        let mut last_message = String::new();

        for attempt in 0..=self.config.retry_limit {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            attempts += 1;
            match self.provider.attempt(request, per_attempt.min(remaining)) {
                Ok(text) => {
                    tracing::debug!(purpose = ?request.purpose, attempts, "completion ok");
                    return Ok(text);
                }
                Err(AttemptError::Auth(msg)) => return Err(Error::AuthFailure(msg)),
                Err(AttemptError::Fatal(msg)) => {
                    return Err(Error::ProviderFailure { attempts, message: msg })
                }
                Err(AttemptError::Unmatched(msg)) => return Err(Error::UnmatchedRequest(msg)),
                Err(AttemptError::Timeout) => {
                    last_timeout = true;
                    last_message = "timed out".into();
                }
                Err(AttemptError::Transient(msg)) => {
                    last_timeout = false;
                    last_message = msg;
                }
            }
            tracing::warn!(purpose = ?request.purpose, attempt = attempts, error = %last_message, "completion attempt failed");
            if attempt < self.config.retry_limit {
                let backoff = self.config.backoff_base.saturating_mul(1 << attempt.min(16));
                let remaining = deadline.saturating_duration_since(Instant::now());
                std::thread::sleep(backoff.min(remaining));
            }
        }
        if last_timeout {
            Err(Error::Timeout { attempts })
        } else {
            Err(Error::ProviderFailure { attempts, message: last_message })
        }
    }

    /// Completes and parses; on a parse failure re-asks once with
    /// [`REASK_INSTRUCTION`] appended, then gives up with `malformed`.
    pub fn complete_structured<T>(
        &self,
        request: &CompletionRequest,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
        malformed: impl Fn(String) -> Error,
    ) -> Result<T> {
        let first = self.complete(request)?;
        let reason = match parse(&first) {
            Ok(v) => return Ok(v),
            Err(reason) => reason,
        };
        tracing::warn!(purpose = ?request.purpose, %reason, "malformed structured output, re-asking");
        let mut retry = request.clone();
        retry.messages.push(ChatMessage::assistant(first));
        retry.messages.push(ChatMessage::user(REASK_INSTRUCTION));
        let second = self.complete(&retry)?;
        parse(&second).map_err(malformed)
    }
}

// ---------------------------------------------------------------------------
// Scripted mock
// ---------------------------------------------------------------------------

/// Selects which requests a script step answers. Unset fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<Purpose>,
    /// Exact [`CompletionRequest::prompt_hash`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    /// Substring of the last user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_user_contains: Option<String>,
}

impl Matcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn purpose(p: Purpose) -> Self {
        Self { purpose: Some(p), ..Self::default() }
    }

    pub fn hash(h: impl Into<String>) -> Self {
        Self { prompt_hash: Some(h.into()), ..Self::default() }
    }

    pub fn and_last_user_contains(mut self, s: impl Into<String>) -> Self {
        self.last_user_contains = Some(s.into());
        self
    }

    pub fn matches(&self, req: &CompletionRequest) -> bool {
        self.purpose.is_none_or(|p| p == req.purpose)
            && self.prompt_hash.as_ref().is_none_or(|h| *h == req.prompt_hash())
            && self.last_user_contains.as_ref().is_none_or(|needle| {
                req.user_messages().last().is_some_and(|m| m.text.contains(needle.as_str()))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Outcome {
    Reply(String),
    Fail(AttemptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default)]
    pub matcher: Matcher,
    pub outcome: Outcome,
    /// A repeating step is never used up.
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptStep {
    pub fn reply(matcher: Matcher, text: impl Into<String>) -> Self {
        Self { matcher, outcome: Outcome::Reply(text.into()), repeat: false }
    }

    pub fn fail(matcher: Matcher, err: AttemptError) -> Self {
        Self { matcher, outcome: Outcome::Fail(err), repeat: false }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

#[derive(Debug, Default)]
struct MockState {
    remaining: VecDeque<ScriptStep>,
    captured: Vec<CompletionRequest>,
}

/// Deterministic provider: each request is answered by the first unused
/// step whose matcher accepts it. Every attempt is captured.
#[derive(Debug)]
pub struct MockProvider {
    state: Mutex<MockState>,
}

impl MockProvider {
    pub fn new(script: Vec<ScriptStep>) -> Self {
        Self {
            state: Mutex::new(MockState { remaining: script.into(), captured: Vec::new() }),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    /// Appends a step after construction, e.g. once the ids it must cite exist.
    pub fn push(&self, step: ScriptStep) {
        self.state.lock().expect("mock poisoned").remaining.push_back(step);
    }

    /// Every request seen so far, including failed attempts.
    pub fn captured(&self) -> Vec<CompletionRequest> {
        self.state.lock().expect("mock poisoned").captured.clone()
    }

    pub fn attempts(&self) -> usize {
        self.state.lock().expect("mock poisoned").captured.len()
    }

    /// Steps not yet consumed (repeating steps always remain).
    pub fn remaining(&self) -> usize {
        self.state.lock().expect("mock poisoned").remaining.len()
    }
}

impl Provider for MockProvider {
    fn attempt(&self, request: &CompletionRequest, _timeout: Duration) -> Result<String, AttemptError> {
        let mut st = self.state.lock().expect("mock poisoned");
        st.captured.push(request.clone());
        let Some(pos) = st.remaining.iter().position(|s| s.matcher.matches(request)) else {
            return Err(AttemptError::Unmatched(format!(
                "purpose={:?} hash={}",
                request.purpose,
                request.prompt_hash()
            )));
        };
        let outcome = if st.remaining[pos].repeat {
            st.remaining[pos].outcome.clone()
        } else {
            st.remaining.remove(pos).expect("position is in range").outcome
        };
        match outcome {
            Outcome::Reply(text) => Ok(text),
            Outcome::Fail(e) => Err(e),
        }
    }
}

/// Builds a mock provider behind a shared handle, keeping the handle so
/// tests can inspect captured requests after handing the provider off.
pub fn mock_provider(script: Vec<ScriptStep>) -> Arc<MockProvider> {
    Arc::new(MockProvider::new(script))
}

// ---------------------------------------------------------------------------
// HTTP provider
// ---------------------------------------------------------------------------

/// OpenAI-style `POST {base_url}/chat/completions`.
pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
}

impl fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProvider").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

impl HttpProvider {
    pub fn new(config: &ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            agent,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key.clone(),
        }
    }

    fn classify(err: ureq::Error) -> AttemptError {
        match err {
            ureq::Error::Timeout(_) => AttemptError::Timeout,
            ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => AttemptError::Timeout,
            other => AttemptError::Transient(other.to_string()),
        }
    }
}

impl Provider for HttpProvider {
    fn attempt(&self, request: &CompletionRequest, timeout: Duration) -> Result<String, AttemptError> {
        let body = WireRequest {
            model: &request.model_name,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage { role: m.role.as_str(), content: &m.text })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(Self::classify)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(Self::classify)?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(AttemptError::Auth(format!("HTTP {status}"))),
            408 | 409 | 425 | 429 | 500..=599 => {
                return Err(AttemptError::Transient(format!("HTTP {status}: {}", truncate(&text, 200))))
            }
            _ => return Err(AttemptError::Fatal(format!("HTTP {status}: {}", truncate(&text, 200)))),
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(format!("unexpected response shape: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| AttemptError::Fatal("response has no choices".into()))
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(mock: &Arc<MockProvider>, retry_limit: u32) -> LlmClient {
        LlmClient::new(
            mock.clone(),
            ProviderConfig {
                retry_limit,
                backoff_base: Duration::ZERO,
                ..ProviderConfig::default()
            },
        )
    }

    fn req(text: &str) -> CompletionRequest {
        CompletionRequest::new(Purpose::Other, vec![ChatMessage::user(text)])
    }

    #[test]
    fn scripted_by_prompt_hash() {
        let r = req("ping");
        let mock = mock_provider(vec![ScriptStep::reply(Matcher::hash(r.prompt_hash()), "OK")]);
        assert_eq!(client(&mock, 0).complete(&r).unwrap(), "OK");
    }

    #[test]
    fn fails_twice_then_succeeds_within_retry_limit() {
        let mock = mock_provider(vec![
            ScriptStep::fail(Matcher::any(), AttemptError::Transient("reset".into())),
            ScriptStep::fail(Matcher::any(), AttemptError::Transient("503".into())),
            ScriptStep::reply(Matcher::any(), "fine"),
        ]);
        assert_eq!(client(&mock, 2).complete(&req("x")).unwrap(), "fine");
        assert_eq!(mock.attempts(), 3);
    }

    #[test]
    fn exhaustion_reports_provider_failure() {
        let mock = mock_provider(vec![
            ScriptStep::fail(Matcher::any(), AttemptError::Transient("down".into())).repeating(),
        ]);
        match client(&mock, 1).complete(&req("x")) {
            Err(Error::ProviderFailure { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mock.attempts(), 2);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let mock = mock_provider(vec![ScriptStep::fail(Matcher::any(), AttemptError::Auth("401".into())).repeating()]);
        assert!(matches!(client(&mock, 3).complete(&req("x")), Err(Error::AuthFailure(_))));
        assert_eq!(mock.attempts(), 1);
    }

    #[test]
    fn trailing_timeouts_surface_as_timeout() {
        let mock = mock_provider(vec![ScriptStep::fail(Matcher::any(), AttemptError::Timeout).repeating()]);
        assert!(matches!(
            client(&mock, 1).complete(&req("x")),
            Err(Error::Timeout { attempts: 2 })
        ));
    }

    #[test]
    fn empty_script_is_unmatched() {
        let mock = mock_provider(vec![]);
        assert!(matches!(client(&mock, 2).complete(&req("x")), Err(Error::UnmatchedRequest(_))));
        assert_eq!(mock.attempts(), 1);
    }

    #[test]
    fn same_script_replays_identically() {
        let script = vec![
            ScriptStep::reply(Matcher::any().and_last_user_contains("a"), "A"),
            ScriptStep::reply(Matcher::any(), "other"),
        ];
        let run = || {
            let mock = mock_provider(script.clone());
            let c = client(&mock, 0);
            ["b", "a", "c"].map(|t| c.complete(&req(t)).ok())
        };
        assert_eq!(run(), run());
        assert_eq!(run(), [Some("other".to_string()), Some("A".to_string()), None]);
    }

    #[test]
    fn request_validation() {
        let mut r = req("x");
        r.temperature = 2.5;
        assert!(matches!(r.validate(), Err(Error::InvalidRequest(_))));
        let empty = CompletionRequest::new(Purpose::Other, vec![]);
        assert!(empty.validate().is_err());
        let late_system = CompletionRequest::new(
            Purpose::Other,
            vec![ChatMessage::user("a"), ChatMessage::system("b")],
        );
        assert!(late_system.validate().is_err());
    }

    #[test]
    fn structured_reask_once_then_malformed() {
        let mock = mock_provider(vec![
            ScriptStep::reply(Matcher::any(), "garbage"),
            ScriptStep::reply(Matcher::any(), "42"),
        ]);
        let c = client(&mock, 0);
        let parse = |s: &str| s.trim().parse::<u32>().map_err(|e| e.to_string());
        assert_eq!(c.complete_structured(&req("n?"), parse, Error::ParseFailure).unwrap(), 42);
        let second = &mock.captured()[1];
        assert_eq!(second.messages.last().unwrap().text, REASK_INSTRUCTION);

        let mock = mock_provider(vec![ScriptStep::reply(Matcher::any(), "nope").repeating()]);
        let c = client(&mock, 0);
        assert!(matches!(
            c.complete_structured(&req("n?"), parse, Error::ParseFailure),
            Err(Error::ParseFailure(_))
        ));
        assert_eq!(mock.attempts(), 2);
    }

    #[test]
    fn in_flight_cap_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Provider for Slow {
            fn attempt(&self, _: &CompletionRequest, _: Duration) -> Result<String, AttemptError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok("ok".into())
            }
        }
        let slow = Arc::new(Slow { now: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let c = LlmClient::new(slow.clone(), ProviderConfig { max_in_flight: 2, ..ProviderConfig::default() });
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| c.complete(&req("x")).unwrap());
            }
        });
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
    }
}
