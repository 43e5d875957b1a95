//! Shared domain types: modalities, label vocabularies, probability vectors,
//! scans, sessions, model/tool outcomes, decisions and trace events.
//!
//! Every type here is an immutable value once built. Constructors enforce the
//! invariants, and deserialization goes through the same constructors so a
//! malformed document cannot produce an invalid value.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::CoordinationStrategy;

/// Absolute tolerance on the sum of a [`ClassDistribution`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("distribution has {got} entries, {task} expects {expected}")]
    WrongLength {
        task: TaskKind,
        expected: usize,
        got: usize,
    },
    #[error("probability {value} at index {index} is negative or not finite")]
    BadProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    BadSum(f64),
    #[error("label index {index} out of range for {task}")]
    LabelOutOfRange { task: TaskKind, index: usize },
    #[error("label name {name:?} does not match index {index} for {task}")]
    LabelNameMismatch {
        task: TaskKind,
        index: usize,
        name: String,
    },
    #[error("query text is empty")]
    EmptyQuery,
    #[error("tool outcome has no model outcomes")]
    EmptyToolOutcome,
    #[error("model {model_id} reports a {got} distribution inside a {expected} tool outcome")]
    MixedTasks {
        model_id: String,
        expected: TaskKind,
        got: TaskKind,
    },
    #[error("model outcome {0}: distribution must be present iff status is ok")]
    OutcomeShape(String),
    #[error("trace event payload is {payload} but stage is {stage}")]
    StageMismatch { stage: Stage, payload: Stage },
    #[error("successful response must name at least one contributing tool")]
    NoContributingTools,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mri,
    Pet,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Mri, Modality::Pet];

    /// Lowercase wire tag (`mri` / `pet`).
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Mri => "mri",
            Modality::Pet => "pet",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mri" => Some(Modality::Mri),
            "pet" => Some(Modality::Pet),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Mri => "MRI",
            Modality::Pet => "PET",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Diagnosis,
    Prognosis,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Diagnosis, TaskKind::Prognosis];

    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::Diagnosis => "diagnosis",
            TaskKind::Prognosis => "prognosis",
        }
    }

    pub fn label_space(self) -> LabelSpace {
        LabelSpace::for_task(self)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

const DIAGNOSIS_LABELS: [&str; 3] = ["CN", "MCI", "AD"];
const PROGNOSIS_LABELS: [&str; 2] = ["Stable", "Converter"];

/// Ordered label vocabulary of a task. Order is fixed by severity:
/// CN=0, MCI=1, AD=2 for diagnosis and Stable=0, Converter=1 for prognosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace {
    task: TaskKind,
    labels: &'static [&'static str],
}

impl LabelSpace {
    pub fn for_task(task: TaskKind) -> Self {
        let labels: &'static [&'static str] = match task {
            TaskKind::Diagnosis => &DIAGNOSIS_LABELS,
            TaskKind::Prognosis => &PROGNOSIS_LABELS,
        };
        Self { task, labels }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn labels(&self) -> &'static [&'static str] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&'static str> {
        self.labels.get(index).copied()
    }

    /// Exact-match lookup.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| *l == name)
    }

    /// Case-insensitive lookup, ignoring surrounding whitespace.
    pub fn index_of_ignore_case(&self, name: &str) -> Option<usize> {
        let name = name.trim();
        self.labels.iter().position(|l| l.eq_ignore_ascii_case(name))
    }
}

/// A probability vector over the labels of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct ClassDistribution {
    task: TaskKind,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDistribution {
    task: TaskKind,
    probs: Vec<f64>,
}

impl TryFrom<RawDistribution> for ClassDistribution {
    type Error = DomainError;

    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        ClassDistribution::new(raw.task, raw.probs)
    }
}

impl ClassDistribution {
    pub fn new(task: TaskKind, probs: Vec<f64>) -> Result<Self, DomainError> {
        let expected = task.label_space().len();
        if probs.len() != expected {
            return Err(DomainError::WrongLength {
                task,
                expected,
                got: probs.len(),
            });
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 || value > 1.0 {
                return Err(DomainError::BadProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(DomainError::BadSum(sum));
        }
        Ok(Self { task, probs })
    }

    /// All mass on one label.
    pub fn one_hot(task: TaskKind, index: usize) -> Result<Self, DomainError> {
        let n = task.label_space().len();
        if index >= n {
            return Err(DomainError::LabelOutOfRange { task, index });
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Self::new(task, probs)
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        crate::coordinator::argmax_lowest(&self.probs)
    }
}

/// Stored scan metadata. Voxel data is never held here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanRef {
    pub id: String,
    pub modality: Modality,
    pub source_uri: String,
    pub dims: [u32; 3],
    pub datatype_code: i16,
    pub validated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuery")]
pub struct Query {
    pub session_id: String,
    pub text: String,
    pub attached_scans: Vec<ScanRef>,
}

#[derive(Deserialize)]
struct RawQuery {
    session_id: String,
    text: String,
    #[serde(default)]
    attached_scans: Vec<ScanRef>,
}

impl TryFrom<RawQuery> for Query {
    type Error = DomainError;

    fn try_from(raw: RawQuery) -> Result<Self, Self::Error> {
        Query::new(raw.session_id, raw.text, raw.attached_scans)
    }
}

impl Query {
    pub fn new(
        session_id: impl Into<String>,
        text: impl Into<String>,
        attached_scans: Vec<ScanRef>,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyQuery);
        }
        Ok(Self {
            session_id: session_id.into(),
            text,
            attached_scans,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelOutcome")]
pub struct ModelOutcome {
    pub model_id: String,
    distribution: Option<ClassDistribution>,
    pub latency_ms: u64,
    status: OutcomeStatus,
}

#[derive(Deserialize)]
struct RawModelOutcome {
    model_id: String,
    distribution: Option<ClassDistribution>,
    #[serde(default)]
    latency_ms: u64,
    status: OutcomeStatus,
}

impl TryFrom<RawModelOutcome> for ModelOutcome {
    type Error = DomainError;

    fn try_from(raw: RawModelOutcome) -> Result<Self, Self::Error> {
        match (&raw.status, raw.distribution.is_some()) {
            (OutcomeStatus::Ok, true) | (OutcomeStatus::Failed(_), false) => Ok(Self {
                model_id: raw.model_id,
                distribution: raw.distribution,
                latency_ms: raw.latency_ms,
                status: raw.status,
            }),
            _ => Err(DomainError::OutcomeShape(raw.model_id)),
        }
    }
}

impl ModelOutcome {
    pub fn ok(model_id: impl Into<String>, distribution: ClassDistribution, latency_ms: u64) -> Self {
        Self {
            model_id: model_id.into(),
            distribution: Some(distribution),
            latency_ms,
            status: OutcomeStatus::Ok,
        }
    }

    pub fn failed(model_id: impl Into<String>, reason: impl Into<String>, latency_ms: u64) -> Self {
        Self {
            model_id: model_id.into(),
            distribution: None,
            latency_ms,
            status: OutcomeStatus::Failed(reason.into()),
        }
    }

    pub fn status(&self) -> &OutcomeStatus {
        &self.status
    }

    pub fn distribution(&self) -> Option<&ClassDistribution> {
        self.distribution.as_ref()
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.status, OutcomeStatus::Ok)
    }
}

/// Every model outcome gathered from one tool invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawToolOutcome")]
pub struct ToolOutcome {
    pub tool_id: String,
    pub task: TaskKind,
    outcomes: Vec<ModelOutcome>,
}

#[derive(Deserialize)]
struct RawToolOutcome {
    tool_id: String,
    task: TaskKind,
    outcomes: Vec<ModelOutcome>,
}

impl TryFrom<RawToolOutcome> for ToolOutcome {
    type Error = DomainError;

    fn try_from(raw: RawToolOutcome) -> Result<Self, Self::Error> {
        ToolOutcome::new(raw.tool_id, raw.task, raw.outcomes)
    }
}

impl ToolOutcome {
    pub fn new(
        tool_id: impl Into<String>,
        task: TaskKind,
        outcomes: Vec<ModelOutcome>,
    ) -> Result<Self, DomainError> {
        if outcomes.is_empty() {
            return Err(DomainError::EmptyToolOutcome);
        }
        for o in &outcomes {
            if let Some(d) = o.distribution() {
                if d.task() != task {
                    return Err(DomainError::MixedTasks {
                        model_id: o.model_id.clone(),
                        expected: task,
                        got: d.task(),
                    });
                }
            }
        }
        Ok(Self {
            tool_id: tool_id.into(),
            task,
            outcomes,
        })
    }

    pub fn outcomes(&self) -> &[ModelOutcome] {
        &self.outcomes
    }

    pub fn ok_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_ok()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDecision")]
pub struct Decision {
    pub task: TaskKind,
    label_index: usize,
    label_name: String,
    pub aggregate_probs: Option<ClassDistribution>,
    pub strategy: CoordinationStrategy,
    pub rationale: String,
}

#[derive(Deserialize)]
struct RawDecision {
    task: TaskKind,
    label_index: usize,
    label_name: String,
    aggregate_probs: Option<ClassDistribution>,
    strategy: CoordinationStrategy,
    rationale: String,
}

impl TryFrom<RawDecision> for Decision {
    type Error = DomainError;

    fn try_from(raw: RawDecision) -> Result<Self, Self::Error> {
        let space = raw.task.label_space();
        match space.name(raw.label_index) {
            None => Err(DomainError::LabelOutOfRange {
                task: raw.task,
                index: raw.label_index,
            }),
            Some(name) if name != raw.label_name => Err(DomainError::LabelNameMismatch {
                task: raw.task,
                index: raw.label_index,
                name: raw.label_name,
            }),
            Some(_) => Ok(Self {
                task: raw.task,
                label_index: raw.label_index,
                label_name: raw.label_name,
                aggregate_probs: raw.aggregate_probs,
                strategy: raw.strategy,
                rationale: raw.rationale,
            }),
        }
    }
}

impl Decision {
    pub fn new(
        task: TaskKind,
        label_index: usize,
        aggregate_probs: Option<ClassDistribution>,
        strategy: CoordinationStrategy,
        rationale: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let name = task
            .label_space()
            .name(label_index)
            .ok_or(DomainError::LabelOutOfRange {
                task,
                index: label_index,
            })?;
        Ok(Self {
            task,
            label_index,
            label_name: name.to_string(),
            aggregate_probs,
            strategy,
            rationale: rationale.into(),
        })
    }

    pub fn label_index(&self) -> usize {
        self.label_index
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }
}

/// Machine-readable failure attached to a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub kind: String,
    pub message: String,
}

/// What the user gets back for one query.
///
/// `decision` is absent for clarification replies and failures; `error` is
/// present only for failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub decision: Option<Decision>,
    pub narrative: String,
    pub contributing_tools: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<FailureInfo>,
}

impl AgentResponse {
    pub fn success(
        decision: Decision,
        narrative: impl Into<String>,
        contributing_tools: Vec<String>,
    ) -> Result<Self, DomainError> {
        if contributing_tools.is_empty() {
            return Err(DomainError::NoContributingTools);
        }
        Ok(Self {
            decision: Some(decision),
            narrative: narrative.into(),
            contributing_tools,
            error: None,
        })
    }

    pub fn clarification(narrative: impl Into<String>) -> Self {
        Self {
            decision: None,
            narrative: narrative.into(),
            contributing_tools: Vec::new(),
            error: None,
        }
    }

    pub fn failure(kind: impl Into<String>, message: impl Into<String>) -> Self {
        let message = message.into();
        Self {
            decision: None,
            narrative: format!("The request could not be completed: {message}"),
            contributing_tools: Vec::new(),
            error: Some(FailureInfo {
                kind: kind.into(),
                message,
            }),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Observation,
    Thought,
    Action,
    Coordination,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Observation => "observation",
            Stage::Thought => "thought",
            Stage::Action => "action",
            Stage::Coordination => "coordination",
        })
    }
}

/// Stage-specific record carried by a [`TraceEvent`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TracePayload {
    Observation {
        query: String,
        observation: crate::engine::Observation,
    },
    Thought {
        plan: Option<crate::engine::ActionPlan>,
        note: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<FailureInfo>,
    },
    Action {
        tool_id: String,
        outcome: ToolOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<FailureInfo>,
    },
    Coordination {
        decision: Decision,
    },
}

impl TracePayload {
    pub fn stage(&self) -> Stage {
        match self {
            TracePayload::Observation { .. } => Stage::Observation,
            TracePayload::Thought { .. } => Stage::Thought,
            TracePayload::Action { .. } => Stage::Action,
            TracePayload::Coordination { .. } => Stage::Coordination,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTraceEvent")]
pub struct TraceEvent {
    pub seq: u64,
    pub stage: Stage,
    pub payload: TracePayload,
    pub timestamp: DateTime<Utc>,
}

#[derive(Deserialize)]
struct RawTraceEvent {
    seq: u64,
    stage: Stage,
    payload: TracePayload,
    timestamp: DateTime<Utc>,
}

impl TryFrom<RawTraceEvent> for TraceEvent {
    type Error = DomainError;

    fn try_from(raw: RawTraceEvent) -> Result<Self, Self::Error> {
        if raw.payload.stage() != raw.stage {
            return Err(DomainError::StageMismatch {
                stage: raw.stage,
                payload: raw.payload.stage(),
            });
        }
        Ok(Self {
            seq: raw.seq,
            stage: raw.stage,
            payload: raw.payload,
            timestamp: raw.timestamp,
        })
    }
}

impl TraceEvent {
    pub fn new(seq: u64, payload: TracePayload, timestamp: DateTime<Utc>) -> Self {
        Self {
            seq,
            stage: payload.stage(),
            payload,
            timestamp,
        }
    }
}

/// State of one clinical conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    scans: BTreeMap<Modality, ScanRef>,
    history: Vec<(Query, AgentResponse)>,
    trace: Vec<TraceEvent>,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            scans: BTreeMap::new(),
            history: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// Stores `scan`, replacing any earlier scan of the same modality.
    /// Returns the replaced scan.
    pub fn put_scan(&mut self, scan: ScanRef) -> Option<ScanRef> {
        self.scans.insert(scan.modality, scan)
    }

    pub fn scans(&self) -> &BTreeMap<Modality, ScanRef> {
        &self.scans
    }

    pub fn scan(&self, modality: Modality) -> Option<&ScanRef> {
        self.scans.get(&modality)
    }

    pub fn history(&self) -> &[(Query, AgentResponse)] {
        &self.history
    }

    pub fn push_exchange(&mut self, query: Query, response: AgentResponse) {
        self.history.push((query, response));
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn next_seq(&self) -> u64 {
        self.trace.last().map_or(0, |e| e.seq + 1)
    }

    /// Appends a new event with the next sequence number and returns it.
    pub fn append_trace(&mut self, payload: TracePayload, timestamp: DateTime<Utc>) -> &TraceEvent {
        let event = TraceEvent::new(self.next_seq(), payload, timestamp);
        self.trace.push(event);
        self.trace.last().expect("just pushed")
    }

    /// Re-inserts an already sequenced event (log replay). Events whose seq
    /// does not advance the trace are ignored; returns whether it was kept.
    pub fn restore_trace(&mut self, event: TraceEvent) -> bool {
        if event.seq < self.next_seq() {
            return false;
        }
        self.trace.push(event);
        true
    }
}
