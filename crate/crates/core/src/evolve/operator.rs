//! Text-completion backends that propose candidate programs.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::prompt::PromptBundle;

pub const DEFAULT_API_KEY_ENV: &str = "V2G_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OperatorError {
    /// Network or server trouble worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("operator configuration: {0}")]
    Config(String),
    #[error("scripted replies exhausted after {0} calls")]
    Exhausted(usize),
}

impl OperatorError {
    pub fn is_retryable(&self) -> bool {
        match self {
            OperatorError::Transport(_) => true,
            OperatorError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorUsage {
    pub requests: u64,
    pub total_tokens: u64,
}

pub trait MutationOperator: Send {
    fn name(&self) -> &str;
    fn complete(&mut self, prompt: &PromptBundle) -> Result<String, OperatorError>;
    fn usage(&self) -> OperatorUsage {
        OperatorUsage::default()
    }
}

impl<O: MutationOperator + ?Sized> MutationOperator for Box<O> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&mut self, prompt: &PromptBundle) -> Result<String, OperatorError> {
        (**self).complete(prompt)
    }

    fn usage(&self) -> OperatorUsage {
        (**self).usage()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay_ms: 500 }
    }
}

/// Calls the operator, retrying retryable errors with exponential backoff.
pub fn complete_with_retry(
    operator: &mut dyn MutationOperator,
    prompt: &PromptBundle,
    retry: &RetryPolicy,
) -> Result<String, OperatorError> {
    let attempts = retry.attempts.max(1);
    let mut attempt = 0;
    loop {
        match operator.complete(prompt) {
            Ok(reply) => return Ok(reply),
            Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                thread::sleep(Duration::from_millis(retry.base_delay_ms.saturating_mul(1 << attempt.min(16))));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// One canned reply, or a scripted transport failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Object {
        #[serde(default)]
        reply: Option<String>,
        #[serde(default)]
        error: Option<String>,
    },
}

impl MockReply {
    fn resolve(&self) -> Result<String, OperatorError> {
        match self {
            MockReply::Text(t) => Ok(t.clone()),
            MockReply::Object { reply: Some(t), error: None } => Ok(t.clone()),
            MockReply::Object { error: Some(e), .. } => Err(OperatorError::Transport(e.clone())),
            MockReply::Object { .. } => Err(OperatorError::Config("mock entry needs `reply` or `error`".into())),
        }
    }
}

/// Replays canned replies in call order. Deterministic by construction.
#[derive(Debug, Clone)]
pub struct ScriptedMock {
    replies: Vec<MockReply>,
    calls: usize,
    /// Keep returning the last reply once the script runs out.
    pub repeat_last: bool,
    prompts: Vec<PromptBundle>,
}

impl ScriptedMock {
    pub fn new(replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::from_entries(replies.into_iter().map(|r| MockReply::Text(r.into())).collect())
    }

    pub fn from_entries(replies: Vec<MockReply>) -> Self {
        Self { replies, calls: 0, repeat_last: false, prompts: Vec::new() }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    /// One JSON value per line: a string, `{"reply": ...}` or `{"error": ...}`.
    pub fn from_jsonl(path: &Path) -> Result<Self, OperatorError> {
        let text = fs::read_to_string(path).map_err(|e| OperatorError::Config(format!("{}: {e}", path.display())))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| OperatorError::Config(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<MockReply>, _>>()?;
        Ok(Self::from_entries(entries))
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn prompts(&self) -> &[PromptBundle] {
        &self.prompts
    }
}

impl MutationOperator for ScriptedMock {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&mut self, prompt: &PromptBundle) -> Result<String, OperatorError> {
        let index = self.calls;
        self.calls += 1;
        self.prompts.push(prompt.clone());
        let entry = match self.replies.get(index) {
            Some(e) => e,
            None if self.repeat_last && !self.replies.is_empty() => self.replies.last().expect("non-empty"),
            None => return Err(OperatorError::Exhausted(index)),
        };
        entry.resolve()
    }

    fn usage(&self) -> OperatorUsage {
        OperatorUsage { requests: self.calls as u64, total_tokens: 0 }
    }
}

/// Operator backed by a closure, handy for tests and local heuristics.
pub struct FnOperator<F> {
    name: String,
    f: F,
    calls: u64,
}

impl<F> FnOperator<F>
where
    F: FnMut(&PromptBundle) -> Result<String, OperatorError> + Send,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f, calls: 0 }
    }
}

impl<F> MutationOperator for FnOperator<F>
where
    F: FnMut(&PromptBundle) -> Result<String, OperatorError> + Send,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&mut self, prompt: &PromptBundle) -> Result<String, OperatorError> {
        self.calls += 1;
        (self.f)(prompt)
    }

    fn usage(&self) -> OperatorUsage {
        OperatorUsage { requests: self.calls, total_tokens: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Chat-completions style endpoint.
    pub url: String,
    pub model: String,
    pub temperature: f64,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 0.2,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
        }
    }
}

/// Sends `{model, temperature, messages}` and reads
/// `choices[0].message.content` from the response.
pub struct HttpChatOperator {
    cfg: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    usage: OperatorUsage,
}

impl HttpChatOperator {
    /// Reads the API key from `cfg.api_key_env`. A missing key is allowed
    /// (local endpoints often need none).
    pub fn new(cfg: HttpConfig) -> Self {
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build();
        Self { cfg, api_key, agent: ureq::Agent::new_with_config(config), usage: OperatorUsage::default() }
    }

    pub fn request_body(&self, prompt: &PromptBundle) -> Value {
        json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
        })
    }
}

impl MutationOperator for HttpChatOperator {
    fn name(&self) -> &str {
        &self.cfg.model
    }

    fn complete(&mut self, prompt: &PromptBundle) -> Result<String, OperatorError> {
        self.usage.requests += 1;
        let mut request = self.agent.post(&self.cfg.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response =
            request.send_json(self.request_body(prompt)).map_err(|e| OperatorError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| OperatorError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let body: String = body.chars().take(500).collect();
            return Err(OperatorError::Status { status, body });
        }
        let value: Value = serde_json::from_str(&body).map_err(|e| OperatorError::Response(e.to_string()))?;
        if let Some(tokens) = value.pointer("/usage/total_tokens").and_then(Value::as_u64) {
            self.usage.total_tokens += tokens;
        }
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| OperatorError::Response("missing choices[0].message.content".into()))
    }

    fn usage(&self) -> OperatorUsage {
        self.usage
    }
}
