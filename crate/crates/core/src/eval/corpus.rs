use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, LabeledText, PromptTemplate};
use crate::error::{Error, Result};
use crate::model::SamplingConfig;
use crate::privacy::epsilon_serde;
use crate::seed::{derive_seed, rng_for};

use super::TextGenerator;

pub const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub n_per_label: usize,
    #[serde(default)]
    pub decoding: SamplingConfig,
    pub seed: u64,
}

/// Privacy and audit facts about the generator a corpus came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub delta: f64,
    pub k_max: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub text: String,
    pub label: String,
    pub generator: String,
    pub seed: u64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub records: Vec<SyntheticRecord>,
    pub provenance: Provenance,
}

impl SyntheticCorpus {
    pub fn failed_count(&self) -> usize {
        self.records.iter().filter(|r| r.failed).count()
    }

    pub fn labeled(&self) -> Vec<LabeledText> {
        self.records
            .iter()
            .map(|r| LabeledText::new(r.text.clone(), r.label.clone()))
            .collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.text.clone()).collect()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

/// Samples `n_per_label` texts for every template label.
///
/// Each sample has its own seed derived from the spec seed, so the corpus is
/// identical however the work is scheduled. A sample whose attempts all
/// fail or come back empty is kept as an empty text flagged `failed`.
pub fn generate_corpus<G: TextGenerator + ?Sized>(
    generator: &G,
    template: &PromptTemplate,
    spec: &GenerationSpec,
    provenance: Provenance,
) -> Result<SyntheticCorpus> {
    if spec.n_per_label == 0 {
        return Err(Error::Config("n_per_label must be positive".into()));
    }
    let labels = template.labels();
    let jobs: Vec<(usize, usize, String)> = labels
        .iter()
        .enumerate()
        .map(|(k, label)| template.render(label).map(|p| (k, p)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|(k, prompt)| (0..spec.n_per_label).map(move |i| (k, i, prompt.clone())))
        .collect();
    let generator_id = generator.generator_id();
    let records = jobs
        .par_iter()
        .map(|(k, i, prompt)| {
            let seed = derive_seed(spec.seed, "sample", ((*k as u64) << 32) | *i as u64);
            let mut text = None;
            for attempt in 0..MAX_ATTEMPTS {
                match generator.generate(prompt, &mut rng_for(seed, "attempt", attempt as u64)) {
                    Ok(t) if !t.trim().is_empty() => {
                        text = Some(t);
                        break;
                    }
                    Ok(_) => {}
                    Err(e) => log::debug!(
                        "generation attempt {attempt} for label {} failed: {e}",
                        labels[*k]
                    ),
                }
            }
            SyntheticRecord {
                failed: text.is_none(),
                text: text.unwrap_or_default(),
                label: labels[*k].clone(),
                generator: generator_id.clone(),
                seed,
            }
        })
        .collect::<Vec<_>>();
    let corpus = SyntheticCorpus {
        records,
        provenance,
    };
    if corpus.failed_count() > 0 {
        log::warn!(
            "{} of {} generations failed",
            corpus.failed_count(),
            corpus.records.len()
        );
    }
    Ok(corpus)
}
