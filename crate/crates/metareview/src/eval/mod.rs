//! Evaluation of generated meta-reviews: aspect coverage, LLM-judged and
//! alignment-based faithfulness, ROUGE against references, fragment overlap
//! against gold annotations, and aggregation over independent runs.

pub mod alignscore;
pub mod coverage;
pub mod geval;
pub mod overlap;
pub mod rouge;
pub mod tokens;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::pipeline::{PipelineError, SystemKind};
use crate::prompts::PromptError;

pub use coverage::{coverage_f1, detect_aspects_in_reviews, detect_aspects_in_text, AspectSet};
pub use geval::{geval_score, parse_first_decimal};
pub use overlap::{fragment_overlap, OverlapScores, OverlapSemantics};
pub use rouge::{rouge, RougeScores};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("entity {entity_id} has no reference meta-review, required by {metric}")]
    MissingReference { entity_id: String, metric: String },
    #[error("entity {entity_id} has no gold fragment annotations, required by fragment overlap")]
    MissingGoldFragments { entity_id: String },
    #[error("reference text contains no tokens")]
    EmptyReference,
    #[error("scorer at {url} unavailable: {reason}")]
    ScorerUnavailable { url: String, reason: String },
    #[error("scorer protocol error: {reason}")]
    ScorerProtocol { reason: String },
    #[error("judge produced no score in [0,1] after {attempts} attempts; last output {last_output:?}")]
    GevalParse { attempts: u32, last_output: String },
    #[error("cannot aggregate zero reports")]
    NoReports,
    #[error("reports disagree on whether {metric} is present; refusing to average over holes")]
    InconsistentFields { metric: String },
    #[error("aspect sets from different domains: {a} vs {b}")]
    DomainMismatch { a: String, b: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Which sample a report describes: one numbered run, or the mean over runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLabel {
    Run(u32),
    Aggregate,
}

impl fmt::Display for RunLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunLabel::Run(i) => write!(f, "run_{i}"),
            RunLabel::Aggregate => f.write_str("mean"),
        }
    }
}

impl RunLabel {
    pub fn parse(s: &str) -> Option<RunLabel> {
        if s == "mean" {
            return Some(RunLabel::Aggregate);
        }
        s.strip_prefix("run_")
            .and_then(|i| i.parse().ok())
            .map(RunLabel::Run)
    }
}

impl Serialize for RunLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RunLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        RunLabel::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid run label {raw:?}")))
    }
}

/// Scores for one generated meta-review (or the mean over a set of them).
/// Absent metrics were not requested or lack the data they need; absence is
/// preserved through aggregation, never coerced to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entity_id: String,
    pub system: SystemKind,
    pub label: RunLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geval: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignscore_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignscore_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge: Option<RougeScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapScores>,
}

impl EvalReport {
    pub fn empty(entity_id: &str, system: SystemKind, label: RunLabel) -> Self {
        EvalReport {
            entity_id: entity_id.to_string(),
            system,
            label,
            coverage: None,
            geval: None,
            alignscore_r: None,
            alignscore_m: None,
            rouge: None,
            overlap: None,
        }
    }
}

fn mean_present<T, F>(
    reports: &[EvalReport],
    metric: &str,
    get: F,
) -> Result<Option<Vec<T>>, EvalError>
where
    F: Fn(&EvalReport) -> Option<T>,
    T: Copy,
{
    let values: Vec<Option<T>> = reports.iter().map(get).collect();
    let present = values.iter().filter(|v| v.is_some()).count();
    if present == 0 {
        return Ok(None);
    }
    if present != values.len() {
        return Err(EvalError::InconsistentFields {
            metric: metric.to_string(),
        });
    }
    Ok(Some(values.into_iter().flatten().collect()))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Arithmetic mean over reports, metric by metric. Every metric must be
/// present in all reports or absent in all of them — averaging a metric over
/// a subset would silently change what the number means.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let entity_id = if reports
        .iter()
        .all(|r| r.entity_id == reports[0].entity_id)
    {
        reports[0].entity_id.clone()
    } else {
        "all".to_string()
    };
    let mut out = EvalReport::empty(&entity_id, reports[0].system, RunLabel::Aggregate);
    out.coverage = mean_present(reports, "coverage", |r| r.coverage)?.map(|v| mean(&v));
    out.geval = mean_present(reports, "geval", |r| r.geval)?.map(|v| mean(&v));
    out.alignscore_r = mean_present(reports, "alignscore_r", |r| r.alignscore_r)?.map(|v| mean(&v));
    out.alignscore_m = mean_present(reports, "alignscore_m", |r| r.alignscore_m)?.map(|v| mean(&v));
    out.rouge = mean_present(reports, "rouge", |r| r.rouge)?.map(|scores| RougeScores {
        rouge1: mean(&scores.iter().map(|s| s.rouge1).collect::<Vec<_>>()),
        rouge2: mean(&scores.iter().map(|s| s.rouge2).collect::<Vec<_>>()),
        rouge_l: mean(&scores.iter().map(|s| s.rouge_l).collect::<Vec<_>>()),
        mean: mean(&scores.iter().map(|s| s.mean).collect::<Vec<_>>()),
    });
    out.overlap = mean_present(reports, "overlap", |r| r.overlap)?.map(|scores| OverlapScores {
        precision: mean(&scores.iter().map(|s| s.precision).collect::<Vec<_>>()),
        recall: mean(&scores.iter().map(|s| s.recall).collect::<Vec<_>>()),
        f1: mean(&scores.iter().map(|s| s.f1).collect::<Vec<_>>()),
    });
    Ok(out)
}
