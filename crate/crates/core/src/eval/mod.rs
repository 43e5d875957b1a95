//! Offline evaluation: metrics, synthetic prediction logs and ablation
//! tables comparing coordination strategies with single-model baselines.

mod ablation;
mod metrics;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{
    render_single, run_ablation, run_repeated, AblationRow, AblationTable, RepeatedRow, RepeatedTable, RowKind,
};
pub use metrics::{compute_metrics, confusion_matrix, Metrics};
pub use synth::{peak_mass, peaked_distribution, synth_log, SynthConfig, SynthModelProfile};

use crate::coordinator::CoordinationError;
use crate::domain::{ModelOutcome, TaskKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no samples to score")]
    EmptyInput,
    #[error("label index {index} is outside 0..{n_classes}")]
    LabelOutOfRange { index: usize, n_classes: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("inconsistent prediction log: {0}")]
    InconsistentLog(String),
    #[error("at least 2 runs are required, got {0}")]
    TooFewRuns(usize),
    #[error("an LLM-coordinated strategy was requested without an LLM backend")]
    MissingLlm,
    #[error("subject {subject_id}: {source}")]
    Coordination {
        subject_id: String,
        #[source]
        source: CoordinationError,
    },
    #[error("malformed prediction log: {0}")]
    Parse(#[from] serde_json::Error),
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::LengthMismatch { .. } => "LengthMismatch",
            EvalError::EmptyInput => "EmptyInput",
            EvalError::LabelOutOfRange { .. } => "LabelOutOfRange",
            EvalError::InvalidInput(_) => "InvalidInput",
            EvalError::InconsistentLog(_) => "InconsistentLog",
            EvalError::TooFewRuns(_) => "TooFewRuns",
            EvalError::MissingLlm => "MissingLlm",
            EvalError::Coordination { .. } => "CoordinationFailed",
            EvalError::Parse(_) => "MalformedLog",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub subject_id: String,
    pub true_label_index: usize,
    pub per_model: Vec<ModelOutcome>,
}

/// One row per subject, each carrying every model's outcome in the same
/// roster order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLog {
    pub task: TaskKind,
    pub records: Vec<PredictionRecord>,
}

impl PredictionLog {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let log: PredictionLog = serde_json::from_str(text)?;
        log.validate()?;
        Ok(log)
    }

    pub fn roster(&self) -> Vec<&str> {
        self.records
            .first()
            .map(|r| r.per_model.iter().map(|o| o.model_id.as_str()).collect())
            .unwrap_or_default()
    }

    /// Checks that the log is non-empty, labels are in range, every record
    /// has the same roster, and all distributions belong to the log's task.
    pub fn validate(&self) -> Result<(), EvalError> {
        let first = self.records.first().ok_or(EvalError::EmptyInput)?;
        if first.per_model.is_empty() {
            return Err(EvalError::InconsistentLog("records carry no model outcomes".into()));
        }
        let roster = self.roster();
        let n = self.task.label_space().len();
        for r in &self.records {
            if r.true_label_index >= n {
                return Err(EvalError::InconsistentLog(format!(
                    "{}: true label {} is outside 0..{n}",
                    r.subject_id, r.true_label_index
                )));
            }
            if r.per_model.len() != roster.len()
                || r.per_model.iter().zip(&roster).any(|(o, id)| o.model_id != *id)
            {
                return Err(EvalError::InconsistentLog(format!("{}: model roster differs", r.subject_id)));
            }
            if let Some(o) = r
                .per_model
                .iter()
                .find(|o| o.distribution().is_some_and(|d| d.task() != self.task))
            {
                return Err(EvalError::InconsistentLog(format!(
                    "{}: {} reports a distribution for another task",
                    r.subject_id, o.model_id
                )));
            }
        }
        Ok(())
    }
}
