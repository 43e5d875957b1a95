//! Backbone LLM access behind a minimal chat-completion interface.
//!
//! Three backends: a remote endpoint speaking the common
//! `/chat/completions` JSON API, a scripted transcript for tests, and
//! deterministic rule functions.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub const DEFAULT_LLM_TIMEOUT_MS: u64 = 60_000;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_CREDENTIALS_ENV: &str = "DXAGENT_LLM_API_KEY";

/// Tie tolerance shared with the coordinator's vote rule.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("LLM backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("LLM backend reply is malformed: {0}")]
    MalformedBackendReply(String),
    #[error("scripted transcript exhausted")]
    TranscriptExhausted,
    #[error("invalid message list: {0}")]
    InvalidMessages(String),
    #[error("invalid LLM configuration: {0}")]
    InvalidConfig(String),
}

impl LlmError {
    pub fn kind(&self) -> &'static str {
        match self {
            LlmError::BackendUnreachable(_) => "BackendUnreachable",
            LlmError::MalformedBackendReply(_) => "MalformedBackendReply",
            LlmError::TranscriptExhausted => "TranscriptExhausted",
            LlmError::InvalidMessages(_) => "InvalidMessages",
            LlmError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

fn check_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    let first = messages
        .first()
        .ok_or_else(|| LlmError::InvalidMessages("no messages".into()))?;
    if first.role != Role::System {
        return Err(LlmError::InvalidMessages("first message must be a system message".into()));
    }
    if let Some(i) = messages
        .iter()
        .position(|m| m.role != Role::Assistant && m.content.trim().is_empty())
    {
        return Err(LlmError::InvalidMessages(format!("message {i} is empty")));
    }
    Ok(())
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Returns the assistant's reply text.
    async fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

fn default_temperature() -> f64 {
    0.0
}
fn default_timeout() -> u64 {
    DEFAULT_LLM_TIMEOUT_MS
}
fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}
fn default_credentials() -> String {
    DEFAULT_CREDENTIALS_ENV.to_string()
}

/// Configuration-level description of an LLM backend.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmBackendRef {
    Remote {
        /// Base URL; `/chat/completions` is appended.
        endpoint: String,
        model_name: String,
        /// Name of the environment variable holding the API key.
        #[serde(default = "default_credentials")]
        credentials_ref: String,
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
    Scripted {
        transcript: Vec<String>,
    },
    Rule {
        rule: String,
    },
}

impl fmt::Debug for LlmBackendRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LlmBackendRef::Remote {
                endpoint,
                model_name,
                temperature,
                ..
            } => f
                .debug_struct("Remote")
                .field("endpoint", endpoint)
                .field("model_name", model_name)
                .field("temperature", temperature)
                .finish_non_exhaustive(),
            LlmBackendRef::Scripted { transcript } => f
                .debug_struct("Scripted")
                .field("entries", &transcript.len())
                .finish(),
            LlmBackendRef::Rule { rule } => f.debug_struct("Rule").field("rule", rule).finish(),
        }
    }
}

impl LlmBackendRef {
    /// Reads `DXAGENT_LLM_URL` and `DXAGENT_LLM_MODEL`; `None` if either is unset.
    pub fn remote_from_env() -> Option<Self> {
        let endpoint = std::env::var("DXAGENT_LLM_URL").ok()?;
        let model_name = std::env::var("DXAGENT_LLM_MODEL").ok()?;
        Some(LlmBackendRef::Remote {
            endpoint,
            model_name,
            credentials_ref: default_credentials(),
            temperature: 0.0,
            timeout_ms: DEFAULT_LLM_TIMEOUT_MS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        })
    }

    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, LlmError> {
        match self {
            LlmBackendRef::Remote {
                endpoint,
                model_name,
                credentials_ref,
                temperature,
                timeout_ms,
                max_in_flight,
            } => {
                if !(0.0..=2.0).contains(temperature) {
                    return Err(LlmError::InvalidConfig(format!(
                        "temperature {temperature} outside [0, 2]"
                    )));
                }
                if *timeout_ms == 0 || *max_in_flight == 0 {
                    return Err(LlmError::InvalidConfig(
                        "timeout_ms and max_in_flight must be positive".into(),
                    ));
                }
                Ok(Arc::new(RemoteChat::new(
                    endpoint,
                    model_name,
                    credentials_ref,
                    *temperature,
                    Duration::from_millis(*timeout_ms),
                    *max_in_flight,
                )))
            }
            LlmBackendRef::Scripted { transcript } => {
                Ok(Arc::new(ScriptedChat::new(transcript.iter().cloned())))
            }
            LlmBackendRef::Rule { rule } => Ok(Arc::new(RuleChat::from_tag(rule)?)),
        }
    }
}

pub struct RemoteChat {
    client: reqwest::Client,
    url: String,
    model_name: String,
    credentials_ref: String,
    temperature: f64,
    timeout: Duration,
    in_flight: Semaphore,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl RemoteChat {
    pub fn new(
        endpoint: &str,
        model_name: &str,
        credentials_ref: &str,
        temperature: f64,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Self {
        Self {
            client: reqwest::Client::new(),
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model_name: model_name.to_string(),
            credentials_ref: credentials_ref.to_string(),
            temperature,
            timeout,
            in_flight: Semaphore::new(max_in_flight),
        }
    }
}

#[async_trait]
impl ChatBackend for RemoteChat {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        check_messages(messages)?;
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|_| LlmError::BackendUnreachable("backend closed".into()))?;
        let body = CompletionRequest {
            model: &self.model_name,
            messages,
            temperature: self.temperature,
        };
        let mut req = self.client.post(&self.url).timeout(self.timeout).json(&body);
        if let Ok(key) = std::env::var(&self.credentials_ref) {
            if !key.is_empty() {
                req = req.bearer_auth(key);
            }
        }
        // Errors are stripped of URLs and never carry request headers.
        let resp = req
            .send()
            .await
            .map_err(|e| LlmError::BackendUnreachable(e.without_url().to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LlmError::BackendUnreachable(format!("HTTP {status}")));
        }
        let parsed: CompletionResponse = resp
            .json()
            .await
            .map_err(|e| LlmError::MalformedBackendReply(e.without_url().to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::MalformedBackendReply("no choices in reply".into()))
    }
}

/// Replays a fixed list of replies, one per call.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    replies: Mutex<VecDeque<String>>,
    calls: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedChat {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("poisoned").len()
    }

    /// Message lists received so far, in call order.
    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.calls.lock().expect("poisoned").clone()
    }
}

#[async_trait]
impl ChatBackend for ScriptedChat {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        check_messages(messages)?;
        self.calls.lock().expect("poisoned").push(messages.to_vec());
        self.replies
            .lock()
            .expect("poisoned")
            .pop_front()
            .ok_or(LlmError::TranscriptExhausted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// Replies `FINAL: <label>` where the label is the plurality of the
    /// per-row argmax over the model table in the prompt. Vote ties go to the
    /// highest mean probability, then to the earliest column.
    EchoVote,
}

#[derive(Debug, Clone)]
pub struct RuleChat {
    rule: Rule,
}

impl RuleChat {
    pub fn new(rule: Rule) -> Self {
        Self { rule }
    }

    pub fn from_tag(tag: &str) -> Result<Self, LlmError> {
        match tag {
            "echo-vote" => Ok(Self::new(Rule::EchoVote)),
            other => Err(LlmError::InvalidConfig(format!("unknown rule {other:?}"))),
        }
    }
}

#[async_trait]
impl ChatBackend for RuleChat {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        check_messages(messages)?;
        match self.rule {
            Rule::EchoVote => Ok(echo_vote(messages)),
        }
    }
}

/// Reads a markdown-style table whose header row starts with `| model_id |`.
fn parse_table(text: &str) -> Option<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().map(str::trim);
    let header = lines.find(|l| l.starts_with("| model_id |"))?;
    let cells = |line: &str| -> Vec<String> {
        line.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
    };
    let labels: Vec<String> = cells(header).into_iter().skip(1).collect();
    let mut rows = Vec::new();
    for line in lines {
        if !line.starts_with('|') {
            break;
        }
        let row = cells(line);
        if row.iter().skip(1).all(|c| c.chars().all(|ch| ch == '-' || ch == ':')) {
            continue;
        }
        let probs: Vec<f64> = row.iter().skip(1).filter_map(|c| c.parse().ok()).collect();
        if probs.len() != labels.len() {
            return None;
        }
        rows.push(probs);
    }
    (!labels.is_empty() && !rows.is_empty()).then_some((labels, rows))
}

fn echo_vote(messages: &[ChatMessage]) -> String {
    let Some((labels, rows)) = messages
        .iter()
        .filter(|m| m.role == Role::User)
        .find_map(|m| parse_table(&m.content))
    else {
        return "I could not find a model output table.".to_string();
    };
    let n = labels.len();
    let mut votes = vec![0usize; n];
    for row in &rows {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best = row.iter().position(|&p| p >= max - TIE_EPS).unwrap_or(0);
        votes[best] += 1;
    }
    let top = *votes.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..n).filter(|&i| votes[i] == top).collect();
    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64;
        let best = tied.iter().map(|&i| mean(i)).fold(f64::NEG_INFINITY, f64::max);
        *tied
            .iter()
            .find(|&&i| mean(i) >= best - TIE_EPS)
            .expect("max is attained")
    };
    format!(
        "FINAL: {}\nREASON: {} of {} models vote for {}",
        labels[winner],
        votes[winner],
        rows.len(),
        labels[winner]
    )
}
