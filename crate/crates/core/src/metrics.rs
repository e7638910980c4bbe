//! Macro/micro F1 and the per-task report layout.

use serde::{Deserialize, Serialize};

use crate::data::{Task, TaskSpec};
use crate::error::{Error, Result};

fn check_inputs(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Contract("metrics need at least one prediction".into()));
    }
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    Ok(())
}

/// Unweighted mean of per-class F1 over `0..classes`. A class that never
/// occurs in either sequence scores 0 and stays in the mean.
pub fn macro_f1(pred: &[usize], gold: &[usize], classes: usize) -> Result<f64> {
    check_inputs(pred, gold)?;
    if classes == 0 {
        return Err(Error::Contract("empty class set".into()));
    }
    if let Some(&bad) = pred.iter().chain(gold).find(|&&c| c >= classes) {
        return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnc = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnc[g] += 1;
        }
    }
    let sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnc[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / classes as f64)
}

/// F1 over TP/FP/FN pooled across classes; equals accuracy for single-label heads.
pub fn micro_f1(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_inputs(pred, gold)?;
    let tp = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    let wrong = pred.len() - tp;
    // every wrong prediction is one FP (for the predicted class) and one FN
    let denom = 2 * tp + 2 * wrong;
    Ok(2.0 * tp as f64 / denom as f64)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_inputs(pred, gold)?;
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub head: String,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub macro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub samples: usize,
    pub heads: Vec<HeadMetrics>,
    /// Mean over the four affect heads; absent for sentiment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average: Option<Average>,
}

/// Builds a report from per-head predictions and gold labels
/// (`pred[h][i]` is sample i's label on head h).
pub fn report(spec: &TaskSpec, pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<MetricsReport> {
    if pred.len() != spec.heads.len() || gold.len() != spec.heads.len() {
        return Err(Error::Config(format!(
            "task {} has {} heads, got {} prediction columns",
            spec.task.as_str(),
            spec.heads.len(),
            pred.len()
        )));
    }
    let heads = spec
        .heads
        .iter()
        .zip(pred.iter().zip(gold))
        .map(|(h, (p, g))| {
            Ok(HeadMetrics {
                head: h.name.clone(),
                macro_f1: macro_f1(p, g, h.classes)?,
                micro_f1: micro_f1(p, g)?,
                accuracy: accuracy(p, g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average = (spec.task != Task::Sentiment).then(|| {
        let n = heads.len() as f64;
        Average {
            macro_f1: heads.iter().map(|h| h.macro_f1).sum::<f64>() / n,
            micro_f1: heads.iter().map(|h| h.micro_f1).sum::<f64>() / n,
        }
    });
    Ok(MetricsReport {
        task: spec.task,
        samples: pred[0].len(),
        heads,
        average,
    })
}
