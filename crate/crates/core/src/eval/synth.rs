//! Reproducible synthetic prediction logs.
//!
//! Each subject draws its true label from the class priors. Each model then
//! draws the label it will favour from its confusion row for that true
//! label and emits a distribution with `peak` mass on it and the rest spread
//! uniformly, where `peak = 1/n + (1 - 1/n) * (1 - exp(-sharpness))`.
//!
//! Every subject has its own ChaCha stream derived from the seed, so the
//! log is identical whether it is generated sequentially or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, PredictionLog, PredictionRecord};
use crate::domain::{ClassDistribution, ModelOutcome, TaskKind, PROB_SUM_TOLERANCE};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModelProfile {
    pub model_id: String,
    /// Row `t` is the distribution of the favoured label when the truth is `t`.
    pub confusion_rows: Vec<Vec<f64>>,
    pub sharpness: f64,
}

impl SynthModelProfile {
    /// A model that favours the true label with probability `accuracy` and
    /// spreads its errors uniformly over the other labels.
    pub fn symmetric(model_id: impl Into<String>, n_classes: usize, accuracy: f64, sharpness: f64) -> Self {
        let off = if n_classes > 1 { (1.0 - accuracy) / (n_classes - 1) as f64 } else { 0.0 };
        let confusion_rows = (0..n_classes)
            .map(|t| (0..n_classes).map(|p| if p == t { accuracy } else { off }).collect())
            .collect();
        Self {
            model_id: model_id.into(),
            confusion_rows,
            sharpness,
        }
    }

    /// Emitted distribution when the model favours `label`.
    pub fn emit(&self, task: TaskKind, label: usize) -> ClassDistribution {
        peaked_distribution(task, label, self.sharpness)
    }
}

pub fn peak_mass(n_classes: usize, sharpness: f64) -> f64 {
    let n = n_classes as f64;
    1.0 / n + (1.0 - 1.0 / n) * (1.0 - (-sharpness).exp())
}

pub fn peaked_distribution(task: TaskKind, label: usize, sharpness: f64) -> ClassDistribution {
    let n = task.label_space().len();
    let peak = peak_mass(n, sharpness);
    let rest = (1.0 - peak) / (n - 1) as f64;
    let probs = (0..n).map(|i| if i == label { peak } else { rest }).collect();
    ClassDistribution::new(task, probs).expect("peaked distribution is valid")
}

fn check_distribution(what: &str, v: &[f64]) -> Result<(), String> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(format!("{what} has a negative or non-finite entry"));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(format!("{what} sums to {sum}"));
    }
    Ok(())
}

fn task_for(n_classes: usize) -> Result<TaskKind, EvalError> {
    TaskKind::ALL
        .into_iter()
        .find(|t| t.label_space().len() == n_classes)
        .ok_or_else(|| EvalError::InvalidInput(format!("no task has {n_classes} classes")))
}

fn sample(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; take the last non-zero weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Generates a log. The task follows from the number of classes in
/// `class_priors` (3 = diagnosis, 2 = prognosis).
pub fn synth_log(
    profiles: &[SynthModelProfile],
    class_priors: &[f64],
    n_subjects: usize,
    seed: u64,
    exec: Execution,
) -> Result<PredictionLog, EvalError> {
    if profiles.is_empty() {
        return Err(EvalError::InvalidInput("at least one model profile is required".into()));
    }
    if n_subjects == 0 {
        return Err(EvalError::InvalidInput("n_subjects must be at least 1".into()));
    }
    let task = task_for(class_priors.len())?;
    check_distribution("class_priors", class_priors).map_err(EvalError::InvalidInput)?;
    for p in profiles {
        if !(p.sharpness.is_finite() && p.sharpness > 0.0) {
            return Err(EvalError::InvalidInput(format!("{}: sharpness must be positive", p.model_id)));
        }
        if p.confusion_rows.len() != class_priors.len()
            || p.confusion_rows.iter().any(|r| r.len() != class_priors.len())
        {
            return Err(EvalError::InvalidInput(format!(
                "{}: confusion rows must be {n}x{n}",
                p.model_id,
                n = class_priors.len()
            )));
        }
        for (t, row) in p.confusion_rows.iter().enumerate() {
            check_distribution(&format!("{} row {t}", p.model_id), row).map_err(EvalError::InvalidInput)?;
        }
    }

    let records = par::map_range(n_subjects, exec, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let truth = sample(&mut rng, class_priors);
        let per_model = profiles
            .iter()
            .map(|p| {
                let favoured = sample(&mut rng, &p.confusion_rows[truth]);
                ModelOutcome::ok(&p.model_id, p.emit(task, favoured), 0)
            })
            .collect();
        PredictionRecord {
            subject_id: format!("subj-{i:06}"),
            true_label_index: truth,
            per_model,
        }
    });
    Ok(PredictionLog { task, records })
}

/// Declarative input for [`synth_log`], as read by the `synth` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub profiles: Vec<SynthModelProfile>,
    pub class_priors: Vec<f64>,
    pub n_subjects: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    /// `n_models` symmetric models of equal accuracy and sharpness with
    /// uniform class priors.
    pub fn independent(n_models: usize, task: TaskKind, accuracy: f64, sharpness: f64, n_subjects: usize) -> Self {
        let n = task.label_space().len();
        Self {
            profiles: (0..n_models)
                .map(|i| SynthModelProfile::symmetric(format!("model-{}", i + 1), n, accuracy, sharpness))
                .collect(),
            class_priors: vec![1.0 / n as f64; n],
            n_subjects,
            seed: 0,
        }
    }

    pub fn generate(&self, seed: u64, exec: Execution) -> Result<PredictionLog, EvalError> {
        synth_log(&self.profiles, &self.class_priors, self.n_subjects, seed, exec)
    }
}
