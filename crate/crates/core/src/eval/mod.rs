//! Synthetic corpus generation and utility measurement: downstream
//! classification on original test data, perplexity under a reference model
//! and multi-seed aggregation.

mod classifier;
mod corpus;
mod metrics;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use classifier::{
    evaluate, select_best, train_downstream_classifier, Classifier, ClassifierConfig, EpochEval,
    TrainedClassifier,
};
pub use corpus::{
    generate_corpus, GenerationSpec, Provenance, SyntheticCorpus, SyntheticRecord, MAX_ATTEMPTS,
};
pub use metrics::{multi_seed_report, score, EvalReport, Scores, SeedMetrics, Summary};

/// Anything that turns an instruction into a synthetic text.
pub trait TextGenerator: Sync {
    fn generator_id(&self) -> String;
    fn generate(&self, instruction: &str, rng: &mut ChaCha8Rng) -> Result<String>;
}

/// A language model that assigns natural-log probabilities to the tokens of a text.
pub trait TokenScorer: Sync {
    fn vocab_size(&self) -> usize;
    fn token_log_probs(&self, text: &str) -> Result<Vec<f64>>;
}

/// Every token (words plus end-of-sequence) has probability `1/V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl TokenScorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn token_log_probs(&self, text: &str) -> Result<Vec<f64>> {
        let n = text.split_whitespace().count() + 1;
        Ok(vec![-(self.vocab_size as f64).ln(); n])
    }
}

/// Pooled token negative log-likelihood; shards merge by summation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TokenNll {
    pub sum: f64,
    pub tokens: usize,
}

impl TokenNll {
    /// Scores every non-empty text.
    pub fn of<S: TokenScorer + ?Sized>(scorer: &S, texts: &[String]) -> Result<Self> {
        let mut acc = Self::default();
        for text in texts.iter().filter(|t| !t.trim().is_empty()) {
            let lp = scorer.token_log_probs(text)?;
            acc.sum -= lp.iter().sum::<f64>();
            acc.tokens += lp.len();
        }
        Ok(acc)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            sum: self.sum + other.sum,
            tokens: self.tokens + other.tokens,
        }
    }

    pub fn perplexity(&self) -> Result<f64> {
        if self.tokens == 0 {
            return Err(Error::Data(
                "perplexity is undefined for a corpus without text".into(),
            ));
        }
        let mean = self.sum / self.tokens as f64;
        let ppl = mean.exp();
        if !ppl.is_finite() {
            return Err(Error::Numeric(format!(
                "perplexity overflowed (mean nll {mean})"
            )));
        }
        Ok(ppl)
    }
}

/// `exp` of the mean token negative log-likelihood, pooled over all tokens
/// of all non-empty texts.
pub fn perplexity<S: TokenScorer + ?Sized>(scorer: &S, texts: &[String]) -> Result<f64> {
    TokenNll::of(scorer, texts)?.perplexity()
}
