use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and unweighted per-class F1 mean over `labels`. A class that
/// never occurs in predictions or gold contributes F1 = 0.
pub fn score(predicted: &[String], gold: &[String], labels: &[String]) -> Result<Scores> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Data("cannot score an empty test set".into()));
    }
    if labels.is_empty() {
        return Err(Error::Contract("no declared labels".into()));
    }
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    let f1_sum: f64 = labels
        .iter()
        .map(|label| {
            let tp = predicted
                .iter()
                .zip(gold)
                .filter(|(p, g)| *p == label && *g == label)
                .count() as f64;
            let fp = predicted
                .iter()
                .zip(gold)
                .filter(|(p, g)| *p == label && *g != label)
                .count() as f64;
            let fn_ = predicted
                .iter()
                .zip(gold)
                .filter(|(p, g)| *p != label && *g == label)
                .count() as f64;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    Ok(Scores {
        accuracy: correct as f64 / gold.len() as f64,
        macro_f1: f1_sum / labels.len() as f64,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Values are sorted first so the result does not depend on input order.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Metrics of one seed's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(default)]
    pub perplexity: Option<f64>,
    #[serde(default)]
    pub failed_generations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<SeedMetrics>,
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub perplexity: Option<Summary>,
    pub failed_generations: usize,
}

/// Aggregates per-seed metrics; runs are kept sorted by seed.
pub fn multi_seed_report(runs: &[SeedMetrics]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::Data("a report needs at least one run".into()));
    }
    let mut runs = runs.to_vec();
    runs.sort_by(|a, b| {
        a.seed
            .cmp(&b.seed)
            .then(a.macro_f1.total_cmp(&b.macro_f1))
            .then(a.accuracy.total_cmp(&b.accuracy))
    });
    let col = |f: fn(&SeedMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let perplexities: Option<Vec<f64>> = runs.iter().map(|r| r.perplexity).collect();
    Ok(EvalReport {
        accuracy: Summary::of(&col(|r| r.accuracy)).expect("non-empty"),
        macro_f1: Summary::of(&col(|r| r.macro_f1)).expect("non-empty"),
        perplexity: perplexities.and_then(|p| Summary::of(&p)),
        failed_generations: runs.iter().map(|r| r.failed_generations).sum(),
        runs,
    })
}
