use std::fmt::Write as _;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use super::{compute_metrics, EvalError, Metrics, PredictionLog, SynthConfig};
use crate::coordinator::{coordinate_average, coordinate_vote, coordinate, CoordinationStrategy};
use crate::domain::TaskKind;
use crate::llm::ChatBackend;
use crate::par::{self, Execution};

/// LLM calls issued concurrently while scoring an LLM-coordinated row.
const LLM_CONCURRENCY: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Strategy(CoordinationStrategy),
    Model(String),
}

impl RowKind {
    pub fn label(&self) -> String {
        match self {
            RowKind::Strategy(s) => s.to_string(),
            RowKind::Model(id) => format!("model:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: RowKind,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: TaskKind,
    pub n_subjects: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, kind: &RowKind) -> Option<&Metrics> {
        self.rows.iter().find(|r| &r.kind == kind).map(|r| &r.metrics)
    }

    /// Best single-model row by accuracy; ties go to the earlier model.
    pub fn best_model(&self) -> Option<&AblationRow> {
        self.rows
            .iter()
            .filter(|r| matches!(r.kind, RowKind::Model(_)))
            .fold(None, |best: Option<&AblationRow>, r| match best {
                Some(b) if b.metrics.acc >= r.metrics.acc => Some(b),
                _ => Some(r),
            })
    }
}

async fn strategy_predictions(
    log: &PredictionLog,
    strategy: CoordinationStrategy,
    llm: Option<&dyn ChatBackend>,
    exec: Execution,
) -> Result<Vec<usize>, EvalError> {
    let wrap = |subject_id: &str| {
        let subject_id = subject_id.to_string();
        move |source| EvalError::Coordination { subject_id, source }
    };
    match strategy {
        CoordinationStrategy::Average | CoordinationStrategy::Vote => {
            let f = if strategy == CoordinationStrategy::Average { coordinate_average } else { coordinate_vote };
            par::try_map_slice(&log.records, exec, |r| {
                f(&r.per_model).map(|d| d.label_index()).map_err(wrap(&r.subject_id))
            })
        }
        CoordinationStrategy::LlmCoordinated { .. } => {
            let llm = llm.ok_or(EvalError::MissingLlm)?;
            stream::iter(&log.records)
                .map(|r| async move {
                    coordinate(strategy, &r.per_model, Some(llm))
                        .await
                        .map(|d| d.label_index())
                        .map_err(wrap(&r.subject_id))
                })
                .buffered(LLM_CONCURRENCY)
                .try_collect()
                .await
        }
    }
}

/// Scores each strategy on `log`, followed by one baseline row per model in
/// roster order. A model's baseline covers the records where it succeeded.
pub async fn run_ablation(
    log: &PredictionLog,
    strategies: &[CoordinationStrategy],
    llm: Option<&dyn ChatBackend>,
    exec: Execution,
) -> Result<AblationTable, EvalError> {
    log.validate()?;
    if strategies.iter().any(|s| matches!(s, CoordinationStrategy::LlmCoordinated { .. })) && llm.is_none() {
        return Err(EvalError::MissingLlm);
    }
    let n = log.task.label_space().len();
    let labels: Vec<usize> = log.records.iter().map(|r| r.true_label_index).collect();
    let mut rows = Vec::new();
    for &s in strategies {
        let preds = strategy_predictions(log, s, llm, exec).await?;
        rows.push(AblationRow {
            kind: RowKind::Strategy(s),
            metrics: compute_metrics(&preds, &labels, n)?,
        });
    }
    for (m, id) in log.roster().into_iter().enumerate() {
        let (preds, truth): (Vec<usize>, Vec<usize>) = log
            .records
            .iter()
            .filter_map(|r| r.per_model[m].distribution().map(|d| (d.argmax(), r.true_label_index)))
            .unzip();
        let metrics = compute_metrics(&preds, &truth, n).map_err(|e| match e {
            EvalError::EmptyInput => EvalError::InconsistentLog(format!("model {id} never succeeded")),
            other => other,
        })?;
        rows.push(AblationRow {
            kind: RowKind::Model(id.to_string()),
            metrics,
        });
    }
    Ok(AblationTable {
        task: log.task,
        n_subjects: log.records.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedRow {
    pub kind: RowKind,
    pub runs: Vec<Metrics>,
    pub mean: Metrics,
    /// Sample standard deviation (n - 1 denominator).
    pub std: Metrics,
}

impl RepeatedRow {
    /// `mean±std` cells to three decimals, in ACC, SPE, SEN, F1 order.
    pub fn cells(&self) -> [String; 4] {
        let (m, s) = (self.mean.as_array(), self.std.as_array());
        std::array::from_fn(|k| format!("{:.3}±{:.3}", m[k], s[k]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedTable {
    pub task: TaskKind,
    pub n_subjects: usize,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub rows: Vec<RepeatedRow>,
}

impl RepeatedTable {
    pub fn row(&self, kind: &RowKind) -> Option<&RepeatedRow> {
        self.rows.iter().find(|r| &r.kind == kind)
    }

    pub fn render_text(&self) -> String {
        let header = ["row", "ACC", "SPE", "SEN", "F1"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                let [a, b, c, d] = r.cells();
                [r.kind.label(), a, b, c, d]
            })
            .collect();
        let mut out = format!(
            "task: {}  subjects: {}  runs: {}  seeds: {}..={}\n",
            self.task.tag(),
            self.n_subjects,
            self.seeds.len(),
            self.seeds.first().copied().unwrap_or_default(),
            self.seeds.last().copied().unwrap_or_default(),
        );
        out.push_str(&render_grid(&header, &body));
        out
    }
}

fn render_grid(header: &[&str; 5], body: &[[String; 5]]) -> String {
    let width = |k: usize| {
        body.iter()
            .map(|r| r[k].chars().count())
            .chain([header[k].len()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..5).map(width).collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (c, w))| {
                let pad = w - c.chars().count();
                if k == 0 { format!("{c}{}", " ".repeat(pad)) } else { format!("{}{c}", " ".repeat(pad)) }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec());
    for r in body {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

/// Text rendering of a single-run table with four decimals.
pub fn render_single(table: &AblationTable) -> String {
    let header = ["row", "ACC", "SPE", "SEN", "F1"];
    let body: Vec<[String; 5]> = table
        .rows
        .iter()
        .map(|r| {
            let m = r.metrics.as_array();
            [
                r.kind.label(),
                format!("{:.4}", m[0]),
                format!("{:.4}", m[1]),
                format!("{:.4}", m[2]),
                format!("{:.4}", m[3]),
            ]
        })
        .collect();
    format!(
        "task: {}  subjects: {}\n{}",
        table.task.tag(),
        table.n_subjects,
        render_grid(&header, &body)
    )
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Generates `n_runs` logs from `config` with seeds `base_seed`,
/// `base_seed + 1`, ... and aggregates each row across runs.
pub async fn run_repeated(
    config: &SynthConfig,
    strategies: &[CoordinationStrategy],
    n_runs: usize,
    base_seed: u64,
    llm: Option<&dyn ChatBackend>,
    exec: Execution,
) -> Result<RepeatedTable, EvalError> {
    if n_runs < 2 {
        return Err(EvalError::TooFewRuns(n_runs));
    }
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let mut tables = Vec::with_capacity(n_runs);
    for &seed in &seeds {
        let log = config.generate(seed, exec)?;
        tables.push(run_ablation(&log, strategies, llm, exec).await?);
    }
    let first = &tables[0];
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let runs: Vec<Metrics> = tables.iter().map(|t| t.rows[i].metrics).collect();
            let mut mean = [0.0; 4];
            let mut std = [0.0; 4];
            for k in 0..4 {
                let col: Vec<f64> = runs.iter().map(|m| m.as_array()[k]).collect();
                (mean[k], std[k]) = mean_std(&col);
            }
            RepeatedRow {
                kind: row.kind.clone(),
                runs,
                mean: Metrics::from_array(mean),
                std: Metrics::from_array(std),
            }
        })
        .collect();
    Ok(RepeatedTable {
        task: first.task,
        n_subjects: first.n_subjects,
        base_seed,
        seeds,
        rows,
    })
}
