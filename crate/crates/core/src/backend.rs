//! Model backends: the tool-server wire protocol client and in-process mocks.
//!
//! Wire protocol: `POST {endpoint}/predict` with
//! `{"task": "diagnosis"|"prognosis", "inputs": {"mri"?: uri, "pet"?: uri}}`,
//! answered by `{"model_id": .., "labels": [..], "probabilities": [..]}`.
//! Labels must equal the task's label vocabulary, in order.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassDistribution, Modality, TaskKind};
use crate::registry::ModelBackendRef;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub task: TaskKind,
    pub inputs: BTreeMap<Modality, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictResponse {
    pub model_id: String,
    pub labels: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl PredictResponse {
    /// Checks the reply against the task's label space.
    pub fn into_distribution(self, task: TaskKind) -> Result<ClassDistribution, String> {
        let space = task.label_space();
        if self.labels.len() != space.len()
            || self.labels.iter().zip(space.labels()).any(|(a, b)| a != b)
        {
            return Err(format!(
                "labels {:?} do not match {:?}",
                self.labels,
                space.labels()
            ));
        }
        ClassDistribution::new(task, self.probabilities).map_err(|e| e.to_string())
    }
}

/// A reply plus, for simulated backends, the latency they report. Real
/// backends leave `reported_latency_ms` empty and the caller measures.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub response: PredictResponse,
    pub reported_latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendFailure {
    pub reason: String,
    pub reported_latency_ms: Option<u64>,
}

impl BackendFailure {
    fn new(reason: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
            reported_latency_ms: None,
        }
    }
}

#[async_trait]
pub trait ModelBackend: Send + Sync {
    async fn predict(&self, request: &PredictRequest) -> Result<Prediction, BackendFailure>;
}

/// Maps a manifest's backend reference to something callable.
pub trait BackendConnector: Send + Sync {
    fn connect(&self, backend: &ModelBackendRef) -> Arc<dyn ModelBackend>;
}

/// HTTP for `http(s)://` endpoints, [`MockBackend`] for `mock:` tags.
#[derive(Clone, Default)]
pub struct DefaultConnector {
    client: reqwest::Client,
}

impl DefaultConnector {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BackendConnector for DefaultConnector {
    fn connect(&self, backend: &ModelBackendRef) -> Arc<dyn ModelBackend> {
        if let Some(spec) = backend.endpoint.strip_prefix("mock:") {
            match MockBackend::parse(&backend.model_id, spec) {
                Ok(mock) => Arc::new(mock),
                Err(e) => Arc::new(MockBackend::failing(&backend.model_id, e)),
            }
        } else {
            Arc::new(HttpBackend {
                client: self.client.clone(),
                endpoint: backend.endpoint.trim_end_matches('/').to_string(),
                timeout: Duration::from_millis(backend.timeout_ms),
            })
        }
    }
}

pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    timeout: Duration,
}

impl HttpBackend {
    fn transport_failure(&self, e: reqwest::Error) -> BackendFailure {
        if e.is_timeout() {
            let ms = self.timeout.as_millis() as u64;
            return BackendFailure {
                reason: format!("timeout after {ms} ms"),
                reported_latency_ms: Some(ms),
            };
        }
        BackendFailure::new(format!("unreachable: {}", e.without_url()))
    }
}

#[async_trait]
impl ModelBackend for HttpBackend {
    async fn predict(&self, request: &PredictRequest) -> Result<Prediction, BackendFailure> {
        let url = format!("{}/predict", self.endpoint);
        let resp = self
            .client
            .post(&url)
            .timeout(self.timeout)
            .json(request)
            .send()
            .await
            .map_err(|e| self.transport_failure(e))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendFailure::new(format!("protocol error: HTTP {status}")));
        }
        let body = resp
            .bytes()
            .await
            .map_err(|e| self.transport_failure(e))?;
        let response: PredictResponse = serde_json::from_slice(&body)
            .map_err(|e| BackendFailure::new(format!("protocol error: {e}")))?;
        Ok(Prediction {
            response,
            reported_latency_ms: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum MockBehavior {
    Respond(Vec<f64>),
    Fail(String),
    Hang,
}

/// Deterministic in-process backend configured by an endpoint tag:
/// `mock:probs=0.2,0.3,0.5`, `mock:probs=..;delay_ms=20`, `mock:fail=reason`
/// or `mock:hang` (never answers, so the caller's timeout fires).
#[derive(Debug, Clone)]
pub struct MockBackend {
    model_id: String,
    behavior: MockBehavior,
    delay_ms: u64,
}

impl MockBackend {
    pub fn responding(model_id: &str, probs: Vec<f64>) -> Self {
        Self {
            model_id: model_id.to_string(),
            behavior: MockBehavior::Respond(probs),
            delay_ms: 0,
        }
    }

    pub fn failing(model_id: &str, reason: impl Into<String>) -> Self {
        Self {
            model_id: model_id.to_string(),
            behavior: MockBehavior::Fail(reason.into()),
            delay_ms: 0,
        }
    }

    pub fn parse(model_id: &str, spec: &str) -> Result<Self, String> {
        let mut behavior = None;
        let mut delay_ms = 0;
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').unwrap_or((part, ""));
            match key {
                "probs" => {
                    let probs = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| format!("bad mock probs {value:?}: {e}"))?;
                    behavior = Some(MockBehavior::Respond(probs));
                }
                "fail" => behavior = Some(MockBehavior::Fail(value.to_string())),
                "hang" => behavior = Some(MockBehavior::Hang),
                "delay_ms" => {
                    delay_ms = value
                        .parse()
                        .map_err(|e| format!("bad mock delay {value:?}: {e}"))?
                }
                other => return Err(format!("unknown mock option {other:?}")),
            }
        }
        Ok(Self {
            model_id: model_id.to_string(),
            behavior: behavior.ok_or_else(|| format!("mock tag {spec:?} has no behavior"))?,
            delay_ms,
        })
    }
}

#[async_trait]
impl ModelBackend for MockBackend {
    async fn predict(&self, request: &PredictRequest) -> Result<Prediction, BackendFailure> {
        if self.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.delay_ms)).await;
        }
        match &self.behavior {
            MockBehavior::Respond(probs) => Ok(Prediction {
                response: PredictResponse {
                    model_id: self.model_id.clone(),
                    labels: request
                        .task
                        .label_space()
                        .labels()
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    probabilities: probs.clone(),
                },
                reported_latency_ms: Some(self.delay_ms),
            }),
            MockBehavior::Fail(reason) => Err(BackendFailure {
                reason: format!("unreachable: {reason}"),
                reported_latency_ms: Some(self.delay_ms),
            }),
            MockBehavior::Hang => std::future::pending().await,
        }
    }
}
