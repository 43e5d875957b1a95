//! Outcome coordination: fuse the per-model outcomes of one tool into a
//! single decision by probability averaging, majority vote, or an LLM
//! reading the full probability table.
//!
//! Ties are always resolved deterministically. Two values within
//! [`TIE_EPS`] of each other count as equal, and among equals the lowest
//! label index (the least severe label) wins.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClassDistribution, Decision, ModelOutcome, OutcomeStatus, TaskKind};
use crate::llm::{ChatBackend, ChatMessage};

pub const TIE_EPS: f64 = 1e-12;
/// Extra LLM attempts after the first malformed reply.
pub const MAX_LLM_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackStrategy {
    Average,
    Vote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinationStrategy {
    Average,
    Vote,
    LlmCoordinated { fallback: FallbackStrategy },
}

impl Default for CoordinationStrategy {
    fn default() -> Self {
        CoordinationStrategy::LlmCoordinated {
            fallback: FallbackStrategy::Average,
        }
    }
}

impl From<FallbackStrategy> for CoordinationStrategy {
    fn from(f: FallbackStrategy) -> Self {
        match f {
            FallbackStrategy::Average => CoordinationStrategy::Average,
            FallbackStrategy::Vote => CoordinationStrategy::Vote,
        }
    }
}

impl fmt::Display for CoordinationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoordinationStrategy::Average => f.write_str("average"),
            CoordinationStrategy::Vote => f.write_str("vote"),
            CoordinationStrategy::LlmCoordinated {
                fallback: FallbackStrategy::Average,
            } => f.write_str("llm"),
            CoordinationStrategy::LlmCoordinated {
                fallback: FallbackStrategy::Vote,
            } => f.write_str("llm:vote"),
        }
    }
}

/// Accepts `average`, `vote`, `llm` (Average fallback) and `llm:vote`.
impl FromStr for CoordinationStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "average" | "avg" => Ok(CoordinationStrategy::Average),
            "vote" => Ok(CoordinationStrategy::Vote),
            "llm" | "llm:average" | "llm_coordinated" => Ok(CoordinationStrategy::LlmCoordinated {
                fallback: FallbackStrategy::Average,
            }),
            "llm:vote" => Ok(CoordinationStrategy::LlmCoordinated {
                fallback: FallbackStrategy::Vote,
            }),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoordinationError {
    #[error("no model produced a usable outcome")]
    NoUsableOutcome,
    #[error("model {0} reports a different task than the others")]
    MixedTasks(String),
    #[error("LLM coordination unavailable: {0}")]
    LlmUnavailable(String),
}

impl CoordinationError {
    pub fn kind(&self) -> &'static str {
        match self {
            CoordinationError::NoUsableOutcome => "NoUsableOutcome",
            CoordinationError::MixedTasks(_) => "MixedTasks",
            CoordinationError::LlmUnavailable(_) => "LlmUnavailable",
        }
    }
}

/// First index whose value is within [`TIE_EPS`] of the maximum.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .position(|&v| v >= max - TIE_EPS)
        .unwrap_or(0)
}

struct Usable<'a> {
    task: TaskKind,
    models: Vec<(&'a str, &'a ClassDistribution)>,
}

fn usable(outcomes: &[ModelOutcome]) -> Result<Usable<'_>, CoordinationError> {
    let models: Vec<_> = outcomes
        .iter()
        .filter_map(|o| o.distribution().map(|d| (o.model_id.as_str(), d)))
        .collect();
    let task = models.first().ok_or(CoordinationError::NoUsableOutcome)?.1.task();
    if let Some((id, _)) = models.iter().find(|(_, d)| d.task() != task) {
        return Err(CoordinationError::MixedTasks(id.to_string()));
    }
    Ok(Usable { task, models })
}

fn mean_probs(u: &Usable<'_>) -> Vec<f64> {
    let n = u.task.label_space().len();
    let mut mean = vec![0.0; n];
    for (_, d) in &u.models {
        for (m, p) in mean.iter_mut().zip(d.probs()) {
            *m += p;
        }
    }
    let k = u.models.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    mean
}

fn model_list(u: &Usable<'_>) -> String {
    u.models.iter().map(|(id, _)| *id).collect::<Vec<_>>().join(", ")
}

/// Soft voting: mean of the usable distributions, then argmax.
pub fn coordinate_average(outcomes: &[ModelOutcome]) -> Result<Decision, CoordinationError> {
    let u = usable(outcomes)?;
    let mean = mean_probs(&u);
    let label = argmax_lowest(&mean);
    let space = u.task.label_space();
    let rationale = format!(
        "mean probability over {} model(s) [{}]: {} = {:.4}",
        u.models.len(),
        model_list(&u),
        space.name(label).expect("in range"),
        mean[label]
    );
    let aggregate = ClassDistribution::new(u.task, mean).ok();
    Ok(Decision::new(u.task, label, aggregate, CoordinationStrategy::Average, rationale)
        .expect("argmax is in range"))
}

/// Hard voting: each model votes for its own argmax. Vote ties go to the
/// tied label with the highest mean probability, then to the lowest index.
pub fn coordinate_vote(outcomes: &[ModelOutcome]) -> Result<Decision, CoordinationError> {
    let u = usable(outcomes)?;
    let n = u.task.label_space().len();
    let mut votes = vec![0usize; n];
    for (_, d) in &u.models {
        votes[d.argmax()] += 1;
    }
    let top = *votes.iter().max().expect("label space is non-empty");
    let tied: Vec<usize> = (0..n).filter(|&i| votes[i] == top).collect();
    let mean = mean_probs(&u);
    let label = if tied.len() == 1 {
        tied[0]
    } else {
        let tied_means: Vec<f64> = tied.iter().map(|&i| mean[i]).collect();
        tied[argmax_lowest(&tied_means)]
    };
    let space = u.task.label_space();
    let tally = space
        .labels()
        .iter()
        .zip(&votes)
        .map(|(l, v)| format!("{l}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut rationale = format!("votes over {} model(s) [{}]: {tally}", u.models.len(), model_list(&u));
    if tied.len() > 1 {
        rationale.push_str("; tie broken by mean probability");
    }
    let k = u.models.len() as f64;
    let shares = ClassDistribution::new(u.task, votes.iter().map(|&v| v as f64 / k).collect()).ok();
    Ok(Decision::new(u.task, label, shares, CoordinationStrategy::Vote, rationale)
        .expect("vote winner is in range"))
}

/// System + user messages asking the LLM to pick a final label from the
/// per-model probability table.
pub fn build_coordinator_prompt(task: TaskKind, outcomes: &[ModelOutcome]) -> Vec<ChatMessage> {
    let space = task.label_space();
    let vocab = space.labels().join(", ");
    let what = match task {
        TaskKind::Diagnosis => "the current disease stage of the patient",
        TaskKind::Prognosis => "whether the MCI patient will convert to AD within 36 months",
    };
    let system = format!(
        "You are the outcome coordinator of a clinical decision-support agent. \
         Several independent models have analysed the same imaging study to determine {what}. \
         Weigh their probability outputs, taking into account agreement between models and \
         how confident each one is, and choose one final label.\n\
         Label vocabulary ({task}): {vocab}.\n\
         Reply format:\n\
         FINAL: <label>\n\
         REASON: <one or two sentences>\n\
         The FINAL line is required and <label> must be one of: {vocab}."
    );

    let mut user = format!("Task: {task}\nModel outputs (probabilities in label order):\n");
    user.push_str("| model_id | ");
    user.push_str(&space.labels().join(" | "));
    user.push_str(" |\n|---|");
    user.push_str(&"---|".repeat(space.len()));
    user.push('\n');
    let mut failed = Vec::new();
    for o in outcomes {
        match (o.distribution(), o.status()) {
            (Some(d), _) => {
                user.push_str("| ");
                user.push_str(&o.model_id);
                for p in d.probs() {
                    user.push_str(&format!(" | {p:.4}"));
                }
                user.push_str(" |\n");
            }
            (None, OutcomeStatus::Failed(reason)) => failed.push(format!("{} ({reason})", o.model_id)),
            (None, OutcomeStatus::Ok) => {}
        }
    }
    if !failed.is_empty() {
        user.push_str(&format!("Unavailable models: {}\n", failed.join("; ")));
    }
    user.push_str("Give your decision.");
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

/// Parses `FINAL: <label>` (case-insensitive) and an optional `REASON:` line.
pub fn parse_coordinator_reply(task: TaskKind, reply: &str) -> Option<(usize, Option<String>)> {
    let space = task.label_space();
    let field = |line: &str, key: &str| -> Option<String> {
        let line = line.trim();
        let head = line.get(..key.len())?;
        head.eq_ignore_ascii_case(key).then(|| line[key.len()..].trim().to_string())
    };
    let label = reply
        .lines()
        .find_map(|l| field(l, "FINAL:"))
        .and_then(|name| space.index_of_ignore_case(&name))?;
    let reason = reply
        .lines()
        .find_map(|l| field(l, "REASON:"))
        .filter(|r| !r.is_empty());
    Some((label, reason))
}

fn reminder(task: TaskKind) -> String {
    format!(
        "Your reply did not follow the required format. Answer with a line \
         `FINAL: <label>` where <label> is one of: {}, optionally followed by `REASON: <text>`.",
        task.label_space().labels().join(", ")
    )
}

fn apply_fallback(
    fallback: FallbackStrategy,
    outcomes: &[ModelOutcome],
    why: &str,
) -> Result<Decision, CoordinationError> {
    let mut decision = match fallback {
        FallbackStrategy::Average => coordinate_average(outcomes),
        FallbackStrategy::Vote => coordinate_vote(outcomes),
    }
    .map_err(|e| CoordinationError::LlmUnavailable(format!("{why}; fallback failed: {e}")))?;
    decision.rationale = format!(
        "fallback to {} ({why}); {}",
        CoordinationStrategy::from(fallback),
        decision.rationale
    );
    Ok(decision)
}

/// LLM-mediated coordination with bounded retries and a deterministic
/// fallback. Never calls the LLM more than `1 + MAX_LLM_RETRIES` times.
pub async fn coordinate_llm(
    outcomes: &[ModelOutcome],
    llm: Option<&dyn ChatBackend>,
    fallback: FallbackStrategy,
) -> Result<Decision, CoordinationError> {
    let u = usable(outcomes)?;
    let task = u.task;
    let Some(llm) = llm else {
        return apply_fallback(fallback, outcomes, "no LLM backend configured");
    };
    let mut messages = build_coordinator_prompt(task, outcomes);
    for attempt in 0..=MAX_LLM_RETRIES {
        let reply = match llm.complete(&messages).await {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(error = %e, "LLM coordinator backend error");
                return apply_fallback(fallback, outcomes, &format!("LLM backend error: {}", e.kind()));
            }
        };
        if let Some((label, reason)) = parse_coordinator_reply(task, &reply) {
            let mean = ClassDistribution::new(task, mean_probs(&u)).ok();
            let rationale = reason.unwrap_or_else(|| reply.trim().to_string());
            return Ok(Decision::new(
                task,
                label,
                mean,
                CoordinationStrategy::LlmCoordinated { fallback },
                rationale,
            )
            .expect("parsed label is in range"));
        }
        tracing::debug!(attempt, "malformed coordinator reply");
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(reminder(task)));
    }
    apply_fallback(
        fallback,
        outcomes,
        &format!("{} malformed LLM replies", MAX_LLM_RETRIES + 1),
    )
}

/// Dispatches to the strategy-specific coordinator.
pub async fn coordinate(
    strategy: CoordinationStrategy,
    outcomes: &[ModelOutcome],
    llm: Option<&dyn ChatBackend>,
) -> Result<Decision, CoordinationError> {
    match strategy {
        CoordinationStrategy::Average => coordinate_average(outcomes),
        CoordinationStrategy::Vote => coordinate_vote(outcomes),
        CoordinationStrategy::LlmCoordinated { fallback } => coordinate_llm(outcomes, llm, fallback).await,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedChat;

    fn diag(id: &str, p: [f64; 3]) -> ModelOutcome {
        ModelOutcome::ok(id, ClassDistribution::new(TaskKind::Diagnosis, p.to_vec()).unwrap(), 0)
    }

    fn prog(id: &str, p: [f64; 2]) -> ModelOutcome {
        ModelOutcome::ok(id, ClassDistribution::new(TaskKind::Prognosis, p.to_vec()).unwrap(), 0)
    }

    #[test]
    fn average_examples() {
        let d = coordinate_average(&[diag("a", [0.2, 0.3, 0.5]), diag("b", [0.6, 0.2, 0.2])]).unwrap();
        assert_eq!(d.label_name(), "CN");
        let mean = d.aggregate_probs.as_ref().unwrap().probs();
        for (m, e) in mean.iter().zip([0.4, 0.25, 0.35]) {
            assert!((m - e).abs() < 1e-12);
        }
        assert_eq!(d.strategy, CoordinationStrategy::Average);
        assert!(d.rationale.contains("a, b"));

        let d = coordinate_average(&[diag("a", [0.1, 0.7, 0.2])]).unwrap();
        assert_eq!(d.label_name(), "MCI");

        let d = coordinate_average(&[diag("a", [0.5, 0.5, 0.0]), diag("b", [0.5, 0.5, 0.0])]).unwrap();
        assert_eq!(d.label_index(), 0);
    }

    #[test]
    fn failed_outcomes_excluded() {
        let outcomes = [diag("a", [0.1, 0.2, 0.7]), ModelOutcome::failed("b", "timeout", 5)];
        assert_eq!(coordinate_average(&outcomes).unwrap().label_name(), "AD");
        assert_eq!(coordinate_vote(&outcomes).unwrap().label_name(), "AD");
        let none = [ModelOutcome::failed("b", "timeout", 5)];
        assert_eq!(coordinate_average(&none), Err(CoordinationError::NoUsableOutcome));
        assert_eq!(coordinate_vote(&none), Err(CoordinationError::NoUsableOutcome));
        assert_eq!(coordinate_average(&[]), Err(CoordinationError::NoUsableOutcome));
    }

    #[test]
    fn mixed_tasks_rejected() {
        let r = coordinate_average(&[diag("a", [0.1, 0.2, 0.7]), prog("b", [0.5, 0.5])]);
        assert_eq!(r, Err(CoordinationError::MixedTasks("b".into())));
    }

    #[test]
    fn vote_examples() {
        let ad = [0.1, 0.2, 0.7];
        let outcomes = [
            diag("a", ad),
            diag("b", ad),
            diag("c", [0.1, 0.8, 0.1]),
            diag("d", [0.8, 0.1, 0.1]),
            diag("e", ad),
        ];
        assert_eq!(coordinate_vote(&outcomes).unwrap().label_name(), "AD");

        let d = coordinate_vote(&[diag("a", [0.6, 0.1, 0.3]), diag("b", [0.2, 0.3, 0.5])]).unwrap();
        assert_eq!(d.label_name(), "CN");
        assert!(d.rationale.contains("tie"));

        assert_eq!(coordinate_vote(&[diag("a", [0.1, 0.8, 0.1])]).unwrap().label_name(), "MCI");
    }

    // Enumerates every way two models can split their votes over three
    // labels with coarse probabilities and checks the two-stage tie-break
    // against a direct statement of the rule.
    #[test]
    fn vote_tie_break_exhaustive() {
        let grid: Vec<[f64; 3]> = (0..=10)
            .flat_map(|a| (0..=10 - a).map(move |b| [a as f64 / 10.0, b as f64 / 10.0, (10 - a - b) as f64 / 10.0]))
            .collect();
        for p in &grid {
            for q in &grid {
                let outcomes = [diag("a", *p), diag("b", *q)];
                let got = coordinate_vote(&outcomes).unwrap().label_index();
                let va = argmax_lowest(p);
                let vb = argmax_lowest(q);
                let expected = if va == vb {
                    va
                } else {
                    let (lo, hi) = (va.min(vb), va.max(vb));
                    let m_lo = (p[lo] + q[lo]) / 2.0;
                    let m_hi = (p[hi] + q[hi]) / 2.0;
                    if m_hi > m_lo + TIE_EPS { hi } else { lo }
                };
                assert_eq!(got, expected, "p={p:?} q={q:?}");
            }
        }
    }

    #[test]
    fn prompt_structure() {
        let outcomes: Vec<_> = (0..5).map(|i| diag(&format!("m{i}"), [0.2, 0.3, 0.5])).collect();
        let msgs = build_coordinator_prompt(TaskKind::Diagnosis, &outcomes);
        assert_eq!(msgs.len(), 2);
        assert!(msgs[0].content.contains("FINAL:"));
        assert_eq!(msgs[1].content.lines().filter(|l| l.starts_with("| m") && !l.starts_with("| model_id")).count(), 5);

        let msgs = build_coordinator_prompt(TaskKind::Prognosis, &[prog("a", [0.5, 0.5])]);
        assert!(msgs[0].content.contains("Stable, Converter"));
        assert!(!msgs[0].content.contains("MCI, AD"));
        assert!(msgs[1].content.contains("| model_id | Stable | Converter |"));

        let third = 1.0 / 3.0;
        let msgs = build_coordinator_prompt(TaskKind::Diagnosis, &[diag("a", [third, third, third])]);
        assert!(msgs[1].content.contains("| a | 0.3333 | 0.3333 | 0.3333 |"));

        let msgs = build_coordinator_prompt(
            TaskKind::Diagnosis,
            &[diag("a", [0.2, 0.3, 0.5]), ModelOutcome::failed("b", "timeout after 5 ms", 5)],
        );
        assert!(msgs[1].content.contains("Unavailable models: b (timeout after 5 ms)"));
    }

    #[test]
    fn reply_parsing() {
        let t = TaskKind::Diagnosis;
        assert_eq!(parse_coordinator_reply(t, "final: ad"), Some((2, None)));
        assert_eq!(
            parse_coordinator_reply(t, "Thinking...\n  FINAL:  MCI \nREASON: agree"),
            Some((1, Some("agree".into())))
        );
        assert_eq!(parse_coordinator_reply(t, "FINAL: dementia"), None);
        assert_eq!(parse_coordinator_reply(t, "I think it could be several things"), None);
        assert_eq!(parse_coordinator_reply(TaskKind::Prognosis, "FINAL: converter"), Some((1, None)));
    }

    #[tokio::test]
    async fn llm_valid_reply() {
        let chat = ScriptedChat::new(["FINAL: MCI\nREASON: majority of strong models agree"]);
        let outcomes = [diag("a", [0.1, 0.7, 0.2]), diag("b", [0.6, 0.2, 0.2])];
        let d = coordinate_llm(&outcomes, Some(&chat), FallbackStrategy::Average).await.unwrap();
        assert_eq!(d.label_name(), "MCI");
        assert_eq!(d.rationale, "majority of strong models agree");
        assert!(matches!(d.strategy, CoordinationStrategy::LlmCoordinated { .. }));
        assert_eq!(chat.calls().len(), 1);
    }

    #[tokio::test]
    async fn llm_malformed_falls_back_after_two_retries() {
        let junk = "I think it could be several things";
        let chat = ScriptedChat::new([junk, junk, junk, "FINAL: AD"]);
        let outcomes = [diag("a", [0.2, 0.3, 0.5]), diag("b", [0.6, 0.2, 0.2])];
        let d = coordinate_llm(&outcomes, Some(&chat), FallbackStrategy::Average).await.unwrap();
        assert_eq!(chat.calls().len(), 3);
        assert_eq!(chat.remaining(), 1);
        assert_eq!(d.strategy, CoordinationStrategy::Average);
        assert_eq!(d.label_name(), "CN");
        assert!(d.rationale.starts_with("fallback to average"));
        // Each retry carries the previous reply and a reminder.
        let last = chat.calls().pop().unwrap();
        assert_eq!(last.len(), 6);
        assert!(last[5].content.contains("FINAL: <label>"));
    }

    #[tokio::test]
    async fn llm_backend_error_and_missing_backend() {
        let chat = ScriptedChat::new(Vec::<String>::new());
        let outcomes = [diag("a", [0.2, 0.3, 0.5])];
        let d = coordinate_llm(&outcomes, Some(&chat), FallbackStrategy::Vote).await.unwrap();
        assert_eq!(d.strategy, CoordinationStrategy::Vote);
        assert!(d.rationale.contains("TranscriptExhausted"));

        let d = coordinate(CoordinationStrategy::default(), &outcomes, None).await.unwrap();
        assert_eq!(d.strategy, CoordinationStrategy::Average);
        assert!(d.rationale.contains("no LLM backend"));

        let none = [ModelOutcome::failed("a", "x", 0)];
        assert_eq!(
            coordinate_llm(&none, Some(&chat), FallbackStrategy::Average).await,
            Err(CoordinationError::NoUsableOutcome)
        );
    }

    #[tokio::test]
    async fn dispatch_identity() {
        let outcomes = [diag("a", [0.2, 0.3, 0.5]), diag("b", [0.6, 0.2, 0.2]), diag("c", [0.1, 0.1, 0.8])];
        assert_eq!(
            coordinate(CoordinationStrategy::Average, &outcomes, None).await,
            coordinate_average(&outcomes)
        );
        assert_eq!(coordinate(CoordinationStrategy::Vote, &outcomes, None).await, coordinate_vote(&outcomes));
    }

    #[test]
    fn strategy_text_and_json() {
        for s in ["average", "vote", "llm", "llm:vote"] {
            let parsed: CoordinationStrategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert_eq!(serde_json::to_string(&CoordinationStrategy::Vote).unwrap(), r#""vote""#);
        assert_eq!(
            serde_json::to_string(&CoordinationStrategy::default()).unwrap(),
            r#"{"llm_coordinated":{"fallback":"average"}}"#
        );
    }
}
