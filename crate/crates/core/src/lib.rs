//! Multi-model clinical reasoning engine for dementia staging and
//! conversion prognosis.
//!
//! A query passes through four stages: observation (intent and available
//! scans), thought (pick the most specific tool), action (fan out to the
//! tool's model backends) and coordination (fuse the model outcomes by
//! averaging, voting or an LLM). The [`eval`] module scores coordination
//! strategies on synthetic prediction logs.

pub mod backend;
pub mod coordinator;
pub mod domain;
pub mod engine;
pub mod eval;
pub mod llm;
pub mod nifti;
pub mod par;
pub mod registry;

pub use coordinator::{CoordinationStrategy, FallbackStrategy};
pub use domain::{
    AgentResponse, ClassDistribution, Decision, LabelSpace, Modality, ModelOutcome, Query, ScanRef,
    SessionState, Stage, TaskKind, ToolOutcome, TraceEvent, TracePayload,
};
pub use engine::Engine;
pub use registry::{ToolInvoker, ToolManifest, ToolRegistry};
