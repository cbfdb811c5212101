//! Chat-completions HTTP agent.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AgentError, AgentReply, AgentSession, TurnContext};
use crate::protocol::{Message, PromptVariant};

fn default_temperature() -> f64 {
    0.6
}
fn default_top_p() -> f64 {
    0.95
}
fn default_max_tokens() -> u32 {
    10_000
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout_secs() -> u64 {
    600
}
fn default_max_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSpec {
    /// Full URL of the chat-completions endpoint.
    pub endpoint_url: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub variant: PromptVariant,
    /// Environment variable holding the bearer token. Empty disables auth.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Requests in flight across all rollouts sharing this agent.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl RemoteSpec {
    pub fn new(endpoint_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteSpec {
            endpoint_url: endpoint_url.into(),
            model: model.into(),
            temperature: default_temperature(),
            top_p: default_top_p(),
            max_tokens: default_max_tokens(),
            variant: PromptVariant::Direct,
            api_key_env: default_api_key_env(),
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if !(self.endpoint_url.starts_with("http://") || self.endpoint_url.starts_with("https://")) {
            return Err(format!("agent.endpoint_url {:?} is not an http(s) URL", self.endpoint_url));
        }
        if self.model.is_empty() {
            return Err("agent.model must not be empty".into());
        }
        if self.max_in_flight == 0 {
            return Err("agent.max_in_flight must be >= 1".into());
        }
        Ok(())
    }
}

/// Bounded exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 16_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64.checked_shl(attempt).unwrap_or(u64::MAX))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Serialize)]
struct WireMessage<'a> {
    role: crate::protocol::Role,
    content: &'a str,
}

/// Request body of the chat-completions protocol.
#[derive(Debug, Serialize)]
pub(crate) struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Counting semaphore for the in-flight request cap.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GatePermit(self)
    }
}

struct GatePermit<'a>(&'a Gate);

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shared HTTP client for one remote endpoint.
pub struct RemoteClient {
    spec: RemoteSpec,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteClient {
    /// Reads the API key from the configured environment variable.
    pub fn new(spec: RemoteSpec) -> Result<Self, AgentError> {
        let api_key = if spec.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&spec.api_key_env).map_err(|_| AgentError::MissingCredential {
                var: spec.api_key_env.clone(),
            })?)
        };
        Self::with_api_key(spec, api_key)
    }

    pub fn with_api_key(spec: RemoteSpec, api_key: Option<String>) -> Result<Self, AgentError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(spec.timeout_secs))
            .build()
            .map_err(|e| AgentError::Transport { message: e.to_string() })?;
        let gate = Gate::new(spec.max_in_flight);
        Ok(RemoteClient {
            spec,
            api_key,
            http,
            gate,
        })
    }

    pub fn spec(&self) -> &RemoteSpec {
        &self.spec
    }

    pub(crate) fn request_body<'a>(&'a self, messages: &'a [Message]) -> ChatRequest<'a> {
        ChatRequest {
            model: &self.spec.model,
            messages: messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role,
                    content: &m.content,
                })
                .collect(),
            temperature: self.spec.temperature,
            top_p: self.spec.top_p,
            max_tokens: self.spec.max_tokens,
        }
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<AgentReply, AgentError> {
        let _permit = self.gate.acquire();
        let mut req = self.http.post(&self.spec.endpoint_url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| AgentError::Transport { message: e.to_string() })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AgentError::Transport { message: e.to_string() })?;
        if !status.is_success() {
            return Err(AgentError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| AgentError::MalformedResponse { message: e.to_string() })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| AgentError::MalformedResponse {
                message: "response has no choices".into(),
            })?
            .message
            .content
            .unwrap_or_default();
        let usage = parsed.usage.unwrap_or_default();
        Ok(AgentReply {
            raw_text: content,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }

    /// Sends `messages`, retrying retryable failures with backoff.
    pub fn complete(&self, messages: &[Message]) -> Result<AgentReply, AgentError> {
        let body = self.request_body(messages);
        let policy = self.spec.retry;
        let mut attempt = 0u32;
        loop {
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                    tracing::warn!(attempt, error = %e, "chat request failed, retrying");
                    std::thread::sleep(policy.backoff(attempt));
                    attempt += 1;
                }
                Err(e) if attempt == 0 && !e.is_retryable() => return Err(e),
                Err(e) => {
                    return Err(AgentError::Exhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
            }
        }
    }
}

pub(crate) struct RemoteSession {
    client: Arc<RemoteClient>,
}

impl RemoteSession {
    pub(crate) fn new(client: Arc<RemoteClient>) -> Self {
        RemoteSession { client }
    }
}

impl AgentSession for RemoteSession {
    fn sample(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        self.client.complete(&ctx.messages())
    }

    fn commit(&mut self, _reply_text: &str) {}
}
