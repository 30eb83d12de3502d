//! Averaged-embedding linear text classifier used as the downstream judge.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledText;
use crate::error::{Error, Result};
use crate::seed::rng_for;

use super::metrics::{score, Scores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub validation_cap: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            learning_rate: 0.2,
            epochs: 5,
            validation_cap: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    labels: Vec<String>,
    words: BTreeMap<String, usize>,
    embedding: Array2<f64>,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Classifier {
    fn new<R: Rng + ?Sized>(
        labels: &[String],
        texts: &[LabeledText],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut words = BTreeMap::new();
        for t in texts {
            for w in t.text.split_whitespace() {
                let next = words.len();
                words.entry(w.to_string()).or_insert(next);
            }
        }
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let embedding = Array2::from_shape_simple_fn((words.len(), dim), || rng.sample(normal));
        let weights = Array2::from_shape_simple_fn((dim, labels.len()), || rng.sample(normal));
        Self {
            labels: labels.to_vec(),
            words,
            embedding,
            weights,
            bias: Array1::zeros(labels.len()),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn word_ids(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .filter_map(|w| self.words.get(w).copied())
            .collect()
    }

    fn features(&self, ids: &[usize]) -> Array1<f64> {
        let mut f = Array1::zeros(self.embedding.ncols());
        for &id in ids {
            f += &self.embedding.row(id);
        }
        if !ids.is_empty() {
            f /= ids.len() as f64;
        }
        f
    }

    fn probabilities(&self, features: &Array1<f64>) -> Array1<f64> {
        let logits = features.dot(&self.weights) + &self.bias;
        let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = logits.mapv(|v| (v - m).exp());
        let z = e.sum();
        e / z
    }

    /// Most probable label; ties go to the earliest declared label.
    pub fn predict(&self, text: &str) -> &str {
        let p = self.probabilities(&self.features(&self.word_ids(text)));
        let mut best = 0;
        for (k, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = k;
            }
        }
        &self.labels[best]
    }

    fn sgd_step(&mut self, text: &str, label: usize, lr: f64) {
        let ids = self.word_ids(text);
        let f = self.features(&ids);
        let mut delta = self.probabilities(&f);
        delta[label] -= 1.0;
        let grad_f = self.weights.dot(&delta);
        for (i, fi) in f.iter().enumerate() {
            for (k, dk) in delta.iter().enumerate() {
                self.weights[[i, k]] -= lr * fi * dk;
            }
        }
        self.bias.scaled_add(-lr, &delta);
        if !ids.is_empty() {
            let share = lr / ids.len() as f64;
            for &id in &ids {
                self.embedding.row_mut(id).scaled_add(-share, &grad_f);
            }
        }
    }
}

/// Predictions and scores on labeled data.
pub fn evaluate(classifier: &Classifier, test: &[LabeledText]) -> Result<Scores> {
    let predicted: Vec<String> = test
        .iter()
        .map(|t| classifier.predict(&t.text).to_string())
        .collect();
    let gold: Vec<String> = test.iter().map(|t| t.label.clone()).collect();
    score(&predicted, &gold, classifier.labels())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub history: Vec<EpochEval>,
    pub best_epoch: usize,
    /// Labels whose training texts are all empty.
    pub degenerate_labels: Vec<String>,
}

/// Index of the highest validation macro-F1; ties go to the earliest epoch.
pub fn select_best(history: &[EpochEval]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in history.iter().enumerate() {
        if best.is_none_or(|b| e.scores.macro_f1 > history[b].scores.macro_f1) {
            best = Some(i);
        }
    }
    best
}

/// Trains for `epochs` passes and returns the snapshot with the best
/// validation macro-F1.
pub fn train_downstream_classifier(
    train: &[LabeledText],
    labels: &[String],
    validation: &[LabeledText],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    if labels.is_empty() {
        return Err(Error::Contract("classifier needs declared labels".into()));
    }
    if config.epochs == 0 {
        return Err(Error::Config("classifier needs at least one epoch".into()));
    }
    if validation.is_empty() {
        return Err(Error::Data(
            "classifier selection needs validation data".into(),
        ));
    }
    let label_index = |l: &str| {
        labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::UnknownLabel(l.to_string()))
    };
    let targets: Vec<usize> = train
        .iter()
        .map(|t| label_index(&t.label))
        .collect::<Result<_>>()?;
    for v in validation {
        label_index(&v.label)?;
    }
    let degenerate_labels: Vec<String> = labels
        .iter()
        .filter(|l| {
            train
                .iter()
                .filter(|t| &&t.label == l)
                .all(|t| t.text.trim().is_empty())
        })
        .cloned()
        .collect();
    if !degenerate_labels.is_empty() {
        log::warn!("degenerate synthetic corpus: no usable text for labels {degenerate_labels:?}");
    }

    let validation: Vec<LabeledText> = if validation.len() > config.validation_cap {
        let mut picked = index::sample(
            &mut rng_for(seed, "validation-subsample", 0),
            validation.len(),
            config.validation_cap,
        )
        .into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| validation[i].clone()).collect()
    } else {
        validation.to_vec()
    };

    let mut clf = Classifier::new(
        labels,
        train,
        config.embedding_dim,
        &mut rng_for(seed, "classifier-init", 0),
    );
    let mut history = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(seed, "classifier-epoch", epoch as u64));
        for &i in &order {
            clf.sgd_step(&train[i].text, targets[i], config.learning_rate);
        }
        history.push(EpochEval {
            epoch: epoch + 1,
            scores: evaluate(&clf, &validation)?,
        });
        snapshots.push(clf.clone());
    }
    let best = select_best(&history).expect("at least one epoch");
    Ok(TrainedClassifier {
        classifier: snapshots.swap_remove(best),
        best_epoch: history[best].epoch,
        history,
        degenerate_labels,
    })
}
