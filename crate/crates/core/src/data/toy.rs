use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledText;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuthorPolicy {
    /// One record per author.
    Unique,
    /// Every author writes `k` consecutive records.
    Repeated { k: usize },
    /// No author ids at all.
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyGrammar {
    /// Each position draws a label word with probability `label_fraction`,
    /// otherwise a shared word. At least one label word is always present.
    Mixed { label_fraction: f64 },
    /// Label word, shared word, label word, ...
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub labels: Vec<String>,
    pub vocab_per_label: usize,
    pub shared_vocab: usize,
    /// Inclusive token-count range.
    pub length_range: (usize, usize),
    pub n_per_label: usize,
    pub author_policy: AuthorPolicy,
    pub grammar: ToyGrammar,
}

impl ToySpec {
    pub fn two_label(n_per_label: usize) -> Self {
        Self {
            labels: vec!["positive".into(), "negative".into()],
            vocab_per_label: 12,
            shared_vocab: 12,
            length_range: (4, 8),
            n_per_label,
            author_policy: AuthorPolicy::Unique,
            grammar: ToyGrammar::Mixed {
                label_fraction: 0.5,
            },
        }
    }

    pub fn label_word(label: &str, i: usize) -> String {
        format!("{label}_{i}")
    }

    pub fn shared_word(i: usize) -> String {
        format!("w{i}")
    }
}

/// Fabricates a labeled corpus whose label signal lives entirely in the
/// label-specific vocabularies, which are disjoint by construction.
pub fn make_toy_dataset<R: Rng + ?Sized>(spec: &ToySpec, rng: &mut R) -> Vec<LabeledText> {
    let (lo, hi) = spec.length_range;
    let hi = hi.max(lo).max(1);
    let lo = lo.max(1);
    let mut out = Vec::with_capacity(spec.labels.len() * spec.n_per_label);
    for label in &spec.labels {
        for _ in 0..spec.n_per_label {
            let len = rng.random_range(lo..=hi);
            let mut words = Vec::with_capacity(len);
            let mut has_label_word = false;
            for pos in 0..len {
                let use_label = match spec.grammar {
                    ToyGrammar::Mixed { label_fraction } => {
                        spec.shared_vocab == 0 || rng.random_bool(label_fraction)
                    }
                    ToyGrammar::Alternating => pos % 2 == 0 || spec.shared_vocab == 0,
                };
                if use_label {
                    has_label_word = true;
                    words.push(ToySpec::label_word(
                        label,
                        rng.random_range(0..spec.vocab_per_label),
                    ));
                } else {
                    words.push(ToySpec::shared_word(rng.random_range(0..spec.shared_vocab)));
                }
            }
            if !has_label_word {
                words[0] = ToySpec::label_word(label, rng.random_range(0..spec.vocab_per_label));
            }
            out.push(LabeledText::new(words.join(" "), label.clone()));
        }
    }
    for (i, r) in out.iter_mut().enumerate() {
        r.author_id = match spec.author_policy {
            AuthorPolicy::Unique => Some(format!("author{i}")),
            AuthorPolicy::Repeated { k } => Some(format!("author{}", i / k.max(1))),
            AuthorPolicy::Missing => None,
        };
    }
    out
}
