//! The episode driver: observation, thought, action and coordination for a
//! single user query, with every stage recorded on the session trace.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{self, CoordinationStrategy};
use crate::domain::{
    AgentResponse, Decision, FailureInfo, Modality, Query, ScanRef, SessionState, TaskKind,
    TraceEvent, TracePayload,
};
use crate::llm::{ChatBackend, ChatMessage};
use crate::registry::{InvokeError, RegistryError, ToolInvoker, ToolRegistry};

const DIAGNOSIS_CUES: [&str; 4] = ["stage", "diagnose", "diagnosis", "what condition"];
const PROGNOSIS_CUES: [&str; 4] = ["progress", "convert", "36 months", "prognosis"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Diagnosis,
    Prognosis,
    Unknown,
}

impl Intent {
    pub fn task(self) -> Option<TaskKind> {
        match self {
            Intent::Diagnosis => Some(TaskKind::Diagnosis),
            Intent::Prognosis => Some(TaskKind::Prognosis),
            Intent::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub intent: Intent,
    pub available_modalities: BTreeSet<Modality>,
    pub sub_queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub tool_id: String,
    pub inputs: BTreeMap<Modality, ScanRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPlan {
    steps: Vec<PlanStep>,
    pub strategy: CoordinationStrategy,
}

impl ActionPlan {
    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("intent is unknown")]
    UnknownIntent,
    #[error("a {0} request needs at least one uploaded scan")]
    MissingScans(TaskKind),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

impl PlanError {
    pub fn kind(&self) -> &'static str {
        match self {
            PlanError::UnknownIntent => "UnknownIntent",
            PlanError::MissingScans(_) => "MissingScans",
            PlanError::Registry(e) => e.kind(),
        }
    }
}

/// Keyword intent classification. Prognosis wins when it has at least as
/// many cue hits as diagnosis, since its cues are the more specific ones.
pub fn classify_intent(text: &str) -> Intent {
    let lower = text.to_lowercase();
    let hits = |cues: &[&str]| cues.iter().filter(|c| lower.contains(*c)).count();
    let (diag, prog) = (hits(&DIAGNOSIS_CUES), hits(&PROGNOSIS_CUES));
    match (diag, prog) {
        (0, 0) => Intent::Unknown,
        (d, p) if p >= d => Intent::Prognosis,
        _ => Intent::Diagnosis,
    }
}

fn split_sub_queries(text: &str) -> Vec<String> {
    let parts: Vec<String> = text
        .split(['?', '.', '!', ';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if parts.is_empty() {
        vec![text.trim().to_string()]
    } else {
        parts
    }
}

/// Observation without any LLM involvement.
pub fn observe_keywords(query: &Query, state: &SessionState) -> Observation {
    Observation {
        intent: classify_intent(&query.text),
        available_modalities: state.scans().keys().copied().collect(),
        sub_queries: split_sub_queries(&query.text),
    }
}

/// Single-step plan for the most specific applicable tool.
pub fn plan(
    obs: &Observation,
    state: &SessionState,
    registry: &ToolRegistry,
    strategy: CoordinationStrategy,
) -> Result<ActionPlan, PlanError> {
    let task = obs.intent.task().ok_or(PlanError::UnknownIntent)?;
    if obs.available_modalities.is_empty() {
        return Err(PlanError::MissingScans(task));
    }
    let candidates = registry.resolve_tools(task, &obs.available_modalities)?;
    let tool_id = candidates.into_iter().next().expect("resolve_tools is non-empty on success");
    let manifest = registry
        .get(&tool_id)
        .ok_or_else(|| RegistryError::UnknownTool(tool_id.clone()))?;
    let inputs = manifest
        .required_modalities
        .iter()
        .filter_map(|m| state.scan(*m).map(|s| (*m, s.clone())))
        .collect();
    Ok(ActionPlan {
        steps: vec![PlanStep { tool_id, inputs }],
        strategy,
    })
}

/// Receives trace events as they are appended.
pub trait TraceSink: Send {
    fn on_event(&mut self, event: &TraceEvent);
}

impl<F: FnMut(&TraceEvent) + Send> TraceSink for F {
    fn on_event(&mut self, event: &TraceEvent) {
        self(event)
    }
}

pub struct NoopSink;

impl TraceSink for NoopSink {
    fn on_event(&mut self, _: &TraceEvent) {}
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Clone, Copy, Default)]
pub struct EngineConfig {
    /// Ask the LLM to classify intent; its answer overrides the keywords.
    pub llm_intent: bool,
}

#[derive(Clone)]
pub struct Engine {
    registry: Arc<ToolRegistry>,
    invoker: ToolInvoker,
    llm: Option<Arc<dyn ChatBackend>>,
    config: EngineConfig,
    clock: Clock,
}

fn describe_label(task: TaskKind, label: &str) -> &'static str {
    match (task, label) {
        (TaskKind::Diagnosis, "CN") => "cognitively normal",
        (TaskKind::Diagnosis, "MCI") => "mild cognitive impairment",
        (TaskKind::Diagnosis, "AD") => "Alzheimer's disease",
        (TaskKind::Prognosis, "Stable") => "stable, no conversion to AD expected within 36 months",
        (TaskKind::Prognosis, "Converter") => "likely to convert to AD within 36 months",
        _ => "",
    }
}

struct Episode<'a> {
    state: &'a mut SessionState,
    sink: &'a mut dyn TraceSink,
    clock: &'a Clock,
}

impl Episode<'_> {
    fn emit(&mut self, payload: TracePayload) {
        let ts = (self.clock)();
        let event = self.state.append_trace(payload, ts);
        self.sink.on_event(event);
    }

    fn finish(self, query: Query, response: AgentResponse) -> AgentResponse {
        self.state.push_exchange(query, response.clone());
        response
    }
}

impl Engine {
    pub fn new(registry: Arc<ToolRegistry>, invoker: ToolInvoker) -> Self {
        Self {
            registry,
            invoker,
            llm: None,
            config: EngineConfig::default(),
            clock: Arc::new(Utc::now),
        }
    }

    pub fn with_llm(mut self, llm: Option<Arc<dyn ChatBackend>>) -> Self {
        self.llm = llm;
        self
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn registry(&self) -> &Arc<ToolRegistry> {
        &self.registry
    }

    pub fn llm(&self) -> Option<&Arc<dyn ChatBackend>> {
        self.llm.as_ref()
    }

    pub async fn observe(&self, query: &Query, state: &SessionState) -> Observation {
        let mut obs = observe_keywords(query, state);
        if self.config.llm_intent {
            if let Some(llm) = &self.llm {
                if let Some(intent) = llm_intent(llm.as_ref(), &query.text).await {
                    obs.intent = intent;
                }
            }
        }
        obs
    }

    /// Runs one episode and records it on `state`. Failures come back as a
    /// response carrying `error`; the trace prefix up to the failure is kept.
    pub async fn run_episode(
        &self,
        query: Query,
        state: &mut SessionState,
        strategy: CoordinationStrategy,
        sink: &mut dyn TraceSink,
    ) -> AgentResponse {
        if query.session_id != state.session_id {
            return AgentResponse::failure(
                "SessionMismatch",
                format!("query targets session {} not {}", query.session_id, state.session_id),
            );
        }
        let obs = self.observe(&query, state).await;
        let mut ep = Episode {
            state,
            sink,
            clock: &self.clock,
        };
        ep.emit(TracePayload::Observation {
            query: query.text.clone(),
            observation: obs.clone(),
        });

        if obs.intent == Intent::Unknown {
            ep.emit(TracePayload::Thought {
                plan: None,
                note: "no diagnosis or prognosis request recognized; asking for clarification".into(),
                error: None,
            });
            let response = AgentResponse::clarification(
                "I can stage a patient (CN, MCI or AD) or predict whether an MCI patient will \
                 convert to AD within 36 months. Please upload MRI and/or PET scans and ask \
                 for a diagnosis or a prognosis.",
            );
            return ep.finish(query, response);
        }

        let plan = match plan(&obs, ep.state, &self.registry, strategy) {
            Ok(p) => p,
            Err(e) => {
                let info = FailureInfo {
                    kind: e.kind().into(),
                    message: e.to_string(),
                };
                ep.emit(TracePayload::Thought {
                    plan: None,
                    note: "no executable plan".into(),
                    error: Some(info.clone()),
                });
                return ep.finish(query, AgentResponse::failure(info.kind, info.message));
            }
        };
        let tool_ids: Vec<String> = plan.steps().iter().map(|s| s.tool_id.clone()).collect();
        ep.emit(TracePayload::Thought {
            plan: Some(plan.clone()),
            note: format!("invoke {} and coordinate with {}", tool_ids.join(", "), strategy),
            error: None,
        });

        let mut outcomes = Vec::new();
        for step in plan.steps() {
            let Some(manifest) = self.registry.get(&step.tool_id) else {
                let e = RegistryError::UnknownTool(step.tool_id.clone());
                return ep.finish(query, AgentResponse::failure(e.kind(), e.to_string()));
            };
            match self.invoker.invoke_tool(&manifest, &step.inputs).await {
                Ok(outcome) => {
                    ep.emit(TracePayload::Action {
                        tool_id: step.tool_id.clone(),
                        outcome: outcome.clone(),
                        error: None,
                    });
                    outcomes.extend(outcome.outcomes().iter().cloned());
                }
                Err(InvokeError::AllBackendsFailed(outcome)) => {
                    let e = InvokeError::AllBackendsFailed(outcome.clone());
                    ep.emit(TracePayload::Action {
                        tool_id: step.tool_id.clone(),
                        outcome,
                        error: Some(FailureInfo {
                            kind: e.kind().into(),
                            message: e.to_string(),
                        }),
                    });
                    return ep.finish(query, AgentResponse::failure(e.kind(), e.to_string()));
                }
                Err(e) => return ep.finish(query, AgentResponse::failure(e.kind(), e.to_string())),
            }
        }

        let decision = match coordinator::coordinate(strategy, &outcomes, self.llm.as_deref()).await {
            Ok(d) => d,
            Err(e) => return ep.finish(query, AgentResponse::failure(e.kind(), e.to_string())),
        };
        ep.emit(TracePayload::Coordination {
            decision: decision.clone(),
        });
        let narrative = narrative(&decision, &tool_ids, &outcomes);
        let response = AgentResponse::success(decision, narrative, tool_ids)
            .expect("plans have at least one step");
        ep.finish(query, response)
    }
}

fn narrative(decision: &Decision, tools: &[String], outcomes: &[crate::domain::ModelOutcome]) -> String {
    let ok = outcomes.iter().filter(|o| o.is_ok()).count();
    let what = match decision.task {
        TaskKind::Diagnosis => "Predicted stage",
        TaskKind::Prognosis => "Predicted course",
    };
    format!(
        "{what}: {} ({}). Based on {ok} of {} models from {} using {} coordination. {}",
        decision.label_name(),
        describe_label(decision.task, decision.label_name()),
        outcomes.len(),
        tools.join(", "),
        decision.strategy,
        decision.rationale
    )
}

async fn llm_intent(llm: &dyn ChatBackend, text: &str) -> Option<Intent> {
    let messages = [
        ChatMessage::system(
            "Classify the clinician's request. Diagnosis means determining the current stage \
             (CN, MCI or AD). Prognosis means predicting whether an MCI patient converts to AD \
             within 36 months. Reply with one line: INTENT: diagnosis | prognosis | unknown",
        ),
        ChatMessage::user(text),
    ];
    let reply = llm.complete(&messages).await.ok()?;
    reply.lines().find_map(|l| {
        let l = l.trim().to_ascii_lowercase();
        match l.strip_prefix("intent:")?.trim() {
            "diagnosis" => Some(Intent::Diagnosis),
            "prognosis" => Some(Intent::Prognosis),
            "unknown" => Some(Intent::Unknown),
            _ => None,
        }
    })
}
