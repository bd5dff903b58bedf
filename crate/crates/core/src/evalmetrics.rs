//! Effective-query diagnostics, greedy accuracy evaluation, and report files.
//!
//! CSV column orders:
//!
//! * metrics: `step,mean_reward,effective_query_ratio,clip_fraction,objective,grad_norm`
//! * timing sidecar: `step,wall_time_s`
//! * eval items: `dataset,id,gold,extracted,reward,overflow`
//! * eval summary: `dataset,n,correct,accuracy`

use crate::dataio::{render_prompt, Dataset, PromptTemplate, QaItem};
use crate::grpo::StepMetrics;
use crate::policy::{greedy_completion, Completion, PolicyError, PolicyParams, Tokenizer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("batch outcome has no queries")]
    NoQueries,
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("item {id}: {source}")]
    Item {
        id: String,
        #[source]
        source: PolicyError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryOutcome {
    SolvedAll,
    SolvedNone,
    Mixed,
}

impl QueryOutcome {
    /// Classifies one group of binary rewards.
    pub fn classify(rewards: &[f64]) -> Self {
        if rewards.iter().all(|&r| r == 1.0) {
            QueryOutcome::SolvedAll
        } else if rewards.iter().all(|&r| r == 0.0) {
            QueryOutcome::SolvedNone
        } else {
            QueryOutcome::Mixed
        }
    }
}

/// Per-query outcome flags for one batch of unique queries.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub queries: Vec<QueryOutcome>,
}

impl BatchOutcome {
    pub fn from_rewards<'a>(groups: impl IntoIterator<Item = &'a [f64]>) -> Self {
        Self {
            queries: groups.into_iter().map(QueryOutcome::classify).collect(),
        }
    }

    pub fn unique_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn count(&self, kind: QueryOutcome) -> usize {
        self.queries.iter().filter(|&&q| q == kind).count()
    }
}

/// `1 - (#solved_all + #solved_none) / #unique_queries`.
pub fn effective_query_ratio(outcome: &BatchOutcome) -> Result<f64, MetricsError> {
    let n = outcome.unique_queries();
    if n == 0 {
        return Err(MetricsError::NoQueries);
    }
    let stuck = outcome.count(QueryOutcome::SolvedAll) + outcome.count(QueryOutcome::SolvedNone);
    Ok(1.0 - stuck as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub gold: String,
    pub extracted: Option<String>,
    pub reward: f64,
    /// Prompt plus generation budget exceeded the context; scored 0.
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub records: Vec<ItemRecord>,
}

impl EvalResult {
    pub fn from_records(dataset: impl Into<String>, records: Vec<ItemRecord>) -> Self {
        let n = records.len();
        let correct = records.iter().filter(|r| r.reward == 1.0).count();
        let accuracy = if n == 0 { 0.0 } else { 100.0 * correct as f64 / n as f64 };
        Self {
            dataset: dataset.into(),
            n,
            correct,
            accuracy,
            records,
        }
    }

    /// Accuracy restricted to the items whose ids satisfy `keep`.
    pub fn subset_accuracy(&self, keep: impl Fn(&str) -> bool) -> Option<f64> {
        let picked: Vec<&ItemRecord> = self.records.iter().filter(|r| keep(&r.id)).collect();
        if picked.is_empty() {
            return None;
        }
        let correct = picked.iter().filter(|r| r.reward == 1.0).count();
        Some(100.0 * correct as f64 / picked.len() as f64)
    }
}

/// One greedy completion per item, scored by the verifier.
pub fn evaluate(
    params: &PolicyParams,
    ds: &Dataset,
    template: &PromptTemplate,
    max_new: usize,
) -> Result<EvalResult, MetricsError> {
    evaluate_with(ds, |item| {
        let prompt = Tokenizer.encode_prompt(&render_prompt(item, template));
        greedy_completion(params, &prompt, &item.answer, max_new)
    })
}

/// Scores the completion `respond` produces for every item. Context
/// overflow counts as wrong and is flagged.
pub fn evaluate_with<F>(ds: &Dataset, respond: F) -> Result<EvalResult, MetricsError>
where
    F: Fn(&QaItem) -> Result<Completion, PolicyError> + Sync,
{
    if ds.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let records = ds
        .items
        .par_iter()
        .map(|item| match respond(item) {
            Ok(c) => Ok(ItemRecord {
                id: item.id.clone(),
                gold: item.answer.clone(),
                extracted: c.extracted.value,
                reward: c.reward,
                overflow: false,
            }),
            Err(PolicyError::ContextOverflow { .. }) => Ok(ItemRecord {
                id: item.id.clone(),
                gold: item.answer.clone(),
                extracted: None,
                reward: 0.0,
                overflow: true,
            }),
            Err(source) => Err(MetricsError::Item {
                id: item.id.clone(),
                source,
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalResult::from_records(ds.name.clone(), records))
}

pub const METRICS_HEADER: &str =
    "step,mean_reward,effective_query_ratio,clip_fraction,objective,grad_norm";

/// Deterministic metrics CSV (no wall time).
pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.step, m.mean_reward, m.effective_query_ratio, m.clip_fraction, m.objective, m.grad_norm
        )
        .expect("string write");
    }
    out
}

pub fn timing_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("step,wall_time_s\n");
    for m in metrics {
        writeln!(out, "{},{:.6}", m.step, m.wall_time_s).expect("string write");
    }
    out
}

pub fn eval_items_csv(evals: &[EvalResult]) -> String {
    let mut out = String::from("dataset,id,gold,extracted,reward,overflow\n");
    for e in evals {
        for r in &e.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&e.dataset),
                csv_field(&r.id),
                csv_field(&r.gold),
                csv_field(r.extracted.as_deref().unwrap_or("")),
                r.reward,
                r.overflow
            )
            .expect("string write");
        }
    }
    out
}

pub fn eval_summary_csv(evals: &[EvalResult]) -> String {
    let mut out = String::from("dataset,n,correct,accuracy\n");
    for e in evals {
        writeln!(out, "{},{},{},{:.4}", csv_field(&e.dataset), e.n, e.correct, e.accuracy)
            .expect("string write");
    }
    out
}

pub fn summary_text(metrics: &[StepMetrics], evals: &[EvalResult]) -> String {
    let mut out = String::new();
    writeln!(out, "steps: {}", metrics.len()).expect("string write");
    if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
        writeln!(
            out,
            "mean reward: first {:.4} last {:.4}",
            first.mean_reward, last.mean_reward
        )
        .expect("string write");
        writeln!(
            out,
            "effective query ratio: first {:.4} last {:.4}",
            first.effective_query_ratio, last.effective_query_ratio
        )
        .expect("string write");
    }
    for e in evals {
        writeln!(
            out,
            "eval {}: {}/{} correct, accuracy {:.4}%",
            e.dataset, e.correct, e.n, e.accuracy
        )
        .expect("string write");
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write(path: &Path, text: &str) -> Result<(), MetricsError> {
    fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `metrics.csv`, `eval_items.csv`, `eval_summary.csv` and
/// `summary.txt` into the directory `dir`.
pub fn emit_report(
    metrics: &[StepMetrics],
    evals: &[EvalResult],
    dir: impl AsRef<Path>,
) -> Result<(), MetricsError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write(&dir.join("metrics.csv"), &metrics_csv(metrics))?;
    write(&dir.join("eval_items.csv"), &eval_items_csv(evals))?;
    write(&dir.join("eval_summary.csv"), &eval_summary_csv(evals))?;
    write(&dir.join("summary.txt"), &summary_text(metrics, evals))
}
