//! Evaluation: cell accuracy, macro-F1, class distribution, token
//! accounting and output-consistency variance.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Usage;
use crate::pipeline::ResultRecord;
use crate::values::{LabelVector, ValueSystem};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions vs {golds} gold label sets")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("instance {index}: label vectors do not share a value system")]
    SystemMismatch { index: usize },
    #[error("nothing to score")]
    Empty,
    #[error("consistency needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {index} has {got} coordinates, expected {expected}")]
    Ragged {
        index: usize,
        expected: usize,
        got: usize,
    },
}

fn check_aligned(preds: &[LabelVector], golds: &[LabelVector]) -> Result<usize, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let first = golds.first().ok_or(MetricsError::Empty)?;
    for (index, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != first.len() || g.len() != first.len() || p.system_name() != g.system_name() {
            return Err(MetricsError::SystemMismatch { index });
        }
    }
    Ok(first.len())
}

/// Share of correct (instance, value) decisions.
pub fn accuracy(preds: &[LabelVector], golds: &[LabelVector]) -> Result<f64, MetricsError> {
    let n = check_aligned(preds, golds)?;
    let correct: usize = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| {
            p.as_slice()
                .iter()
                .zip(g.as_slice())
                .filter(|(a, b)| a == b)
                .count()
        })
        .sum();
    Ok(correct as f64 / (n * golds.len()) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Positive-class F1; 0 when the value never occurs in gold or prediction.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

/// Per-value confusion counts, in value order.
pub fn confusion(
    preds: &[LabelVector],
    golds: &[LabelVector],
) -> Result<Vec<Confusion>, MetricsError> {
    let n = check_aligned(preds, golds)?;
    let mut out = vec![Confusion::default(); n];
    for (p, g) in preds.iter().zip(golds) {
        for (c, (&pp, &gg)) in out.iter_mut().zip(p.as_slice().iter().zip(g.as_slice())) {
            match (pp, gg) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(out)
}

/// Unweighted mean of per-value F1, plus the per-value scores.
pub fn macro_f1(
    preds: &[LabelVector],
    golds: &[LabelVector],
) -> Result<(f64, Vec<f64>), MetricsError> {
    let per: Vec<f64> = confusion(preds, golds)?.iter().map(Confusion::f1).collect();
    let macro_ = per.iter().sum::<f64>() / per.len() as f64;
    Ok((macro_, per))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueCount {
    pub value: String,
    pub count: usize,
}

/// Positive-label count per value, in system order.
pub fn value_counts<'a>(
    labels: impl IntoIterator<Item = &'a LabelVector>,
    system: &ValueSystem,
) -> Vec<ValueCount> {
    let mut counts = vec![0usize; system.len()];
    for l in labels {
        for i in l.positives() {
            if i < counts.len() {
                counts[i] += 1;
            }
        }
    }
    system
        .names()
        .zip(counts)
        .map(|(n, count)| ValueCount {
            value: n.to_string(),
            count,
        })
        .collect()
}

/// max/min positive count; `None` when some value never occurs.
pub fn imbalance_ratio(counts: &[ValueCount]) -> Option<f64> {
    let max = counts.iter().map(|c| c.count).max()?;
    let min = counts.iter().map(|c| c.count).min()?;
    (min > 0).then(|| max as f64 / min as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub instances: usize,
    pub counts: Vec<ValueCount>,
    /// `None` when the smallest count is zero.
    pub max_min_ratio: Option<f64>,
}

pub fn class_distribution(labels: &[LabelVector], system: &ValueSystem) -> ClassDistribution {
    let counts = value_counts(labels, system);
    ClassDistribution {
        instances: labels.len(),
        max_min_ratio: imbalance_ratio(&counts),
        counts,
    }
}

/// Population variance per coordinate across samples, averaged over
/// coordinates.
pub fn consistency_variance(samples: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples(samples.len()));
    }
    let dim = samples[0].len();
    for (index, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(MetricsError::Ragged {
                index,
                expected: dim,
                got: s.len(),
            });
        }
    }
    if dim == 0 {
        return Ok(0.0);
    }
    let m = samples.len() as f64;
    let total: f64 = (0..dim)
        .map(|j| {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / m;
            samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / m
        })
        .sum();
    Ok(total / dim as f64)
}

pub fn label_consistency(samples: &[LabelVector]) -> Result<f64, MetricsError> {
    consistency_variance(&samples.iter().map(LabelVector::to_f64).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsistencyStage {
    /// One detector sample, as a 0/1 vector.
    #[serde(rename = "detector_1")]
    Detector1,
    /// The L-sample relevance probabilities.
    #[serde(rename = "detector_L")]
    DetectorL,
    /// Candidate-set indicator vector.
    #[serde(rename = "candidate_set")]
    CandidateSet,
    /// Final labels.
    #[serde(rename = "final")]
    Final,
}

impl ConsistencyStage {
    pub const ALL: [ConsistencyStage; 4] = [
        ConsistencyStage::Detector1,
        ConsistencyStage::DetectorL,
        ConsistencyStage::CandidateSet,
        ConsistencyStage::Final,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyStage::Detector1 => "detector_1",
            ConsistencyStage::DetectorL => "detector_L",
            ConsistencyStage::CandidateSet => "candidate_set",
            ConsistencyStage::Final => "final",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub stage: ConsistencyStage,
    /// Mean over instances of the per-instance consistency variance.
    pub mean_variance: f64,
    pub instances: usize,
    pub repeats: usize,
}

/// Online-LLM tokens are kept apart from local detector tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub instances: usize,
    pub llm_calls: usize,
    pub llm: Usage,
    pub detector: Usage,
    /// Mean online prompt + completion tokens per instance.
    pub mean_llm_tokens: f64,
    pub mean_llm_prompt_tokens: f64,
    pub mean_llm_completion_tokens: f64,
    pub mean_llm_calls: f64,
    pub mean_detector_tokens: f64,
}

pub fn token_report(results: &[ResultRecord]) -> TokenReport {
    let mut r = TokenReport {
        instances: results.len(),
        ..TokenReport::default()
    };
    for rec in results {
        r.llm += rec.llm_usage();
        r.detector += rec.detector_usage();
        r.llm_calls += rec.llm_calls;
    }
    if !results.is_empty() {
        let n = results.len() as f64;
        r.mean_llm_tokens = r.llm.total() as f64 / n;
        r.mean_llm_prompt_tokens = r.llm.prompt_tokens as f64 / n;
        r.mean_llm_completion_tokens = r.llm.completion_tokens as f64 / n;
        r.mean_llm_calls = r.llm_calls as f64 / n;
        r.mean_detector_tokens = r.detector.total() as f64 / n;
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueScore {
    pub value: String,
    pub f1: f64,
    pub support: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_value: Vec<ValueScore>,
    pub mean_prompt_tokens: f64,
    pub mean_completion_tokens: f64,
    pub tokens: TokenReport,
}

/// Row of the level-grouped per-value F1 table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub value: String,
    pub level: Option<String>,
    pub f1: f64,
    pub support: usize,
}

impl EvalReport {
    /// `results` supplies token usage and may be empty.
    pub fn compute(
        preds: &[LabelVector],
        golds: &[LabelVector],
        system: &ValueSystem,
        results: &[ResultRecord],
    ) -> Result<Self, MetricsError> {
        let conf = confusion(preds, golds)?;
        let accuracy = accuracy(preds, golds)?;
        let per_value: Vec<ValueScore> = system
            .names()
            .zip(&conf)
            .map(|(n, c)| ValueScore {
                value: n.to_string(),
                f1: c.f1(),
                support: c.support(),
                confusion: *c,
            })
            .collect();
        let macro_f1 = per_value.iter().map(|v| v.f1).sum::<f64>() / per_value.len() as f64;
        let tokens = token_report(results);
        Ok(Self {
            instances: golds.len(),
            accuracy,
            macro_f1,
            per_value,
            mean_prompt_tokens: tokens.mean_llm_prompt_tokens,
            mean_completion_tokens: tokens.mean_llm_completion_tokens,
            tokens,
        })
    }

    pub fn plot_rows(&self, level_of: impl Fn(&str) -> Option<String>) -> Vec<PlotRow> {
        self.per_value
            .iter()
            .map(|v| PlotRow {
                value: v.value.clone(),
                level: level_of(&v.value),
                f1: v.f1,
                support: v.support,
            })
            .collect()
    }

    pub fn render_table(&self) -> String {
        let width = self
            .per_value
            .iter()
            .map(|v| v.value.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>7}", "value", "F1", "support");
        for v in &self.per_value {
            let _ = writeln!(s, "{:<width$}  {:>6.4}  {:>7}", v.value, v.f1, v.support);
        }
        let _ = writeln!(s, "{}", "-".repeat(width + 17));
        let _ = writeln!(s, "{:<width$}  {:>6.4}", "macro F1", self.macro_f1);
        let _ = writeln!(s, "{:<width$}  {:>6.4}", "accuracy", self.accuracy);
        let _ = writeln!(s, "{:<width$}  {:>6}", "instances", self.instances);
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.1}",
            "LLM tokens", self.tokens.mean_llm_tokens
        );
        s
    }
}
