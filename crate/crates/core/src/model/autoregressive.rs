//! Compact causal transformer fine-tuned on `instruction <sep> text <eos>`
//! sequences and sampled token by token.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dpsgd::Objective;
use crate::error::{Error, Result};
use crate::eval::{TextGenerator, TokenScorer};
use crate::params::ParamSet;

use super::transformer::{sinusoidal, LayerNorm, Linear, TransformerBlock};
use super::vocab::{Vocabulary, EOS, PAD, SEP, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_sequence_length: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Score only tokens after the instruction prefix.
    #[serde(default)]
    pub mask_instruction: bool,
    #[serde(default = "default_positional")]
    pub positional: PositionalEncoding,
}

fn default_ff_mult() -> usize {
    2
}

fn default_positional() -> PositionalEncoding {
    PositionalEncoding::Learned
}

impl ArConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 32,
            num_layers: 2,
            num_heads: 4,
            max_sequence_length: 24,
            ff_mult: 2,
            mask_instruction: false,
            positional: PositionalEncoding::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SEP {
            return Err(Error::Config(
                "vocabulary must hold more than the reserved tokens".into(),
            ));
        }
        if self.embedding_dim == 0 || self.num_heads == 0 || self.max_sequence_length == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.embedding_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} not divisible by num_heads {}",
                self.embedding_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Token ids plus the length of the forced prefix (instruction and separator).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub instruction_length: usize,
}

impl TokenSequence {
    /// Length without trailing padding.
    pub fn content_len(&self) -> usize {
        self.ids
            .iter()
            .rposition(|&id| id != PAD)
            .map_or(0, |p| p + 1)
    }
}

/// `⟨instruction, sep, text, eos⟩`, truncated from the end to `max_len`.
/// The instruction and separator are never truncated.
pub fn encode(
    vocab: &Vocabulary,
    instruction: &str,
    text: &str,
    max_len: usize,
) -> Result<TokenSequence> {
    let mut ids = vocab.encode_words(instruction);
    ids.push(SEP);
    if ids.len() > max_len {
        return Err(Error::Data(format!(
            "instruction takes {} tokens with separator, limit is {max_len}",
            ids.len()
        )));
    }
    let instruction_length = ids.len();
    ids.extend(vocab.encode_words(text));
    ids.push(EOS);
    ids.truncate(max_len);
    Ok(TokenSequence {
        ids,
        instruction_length,
    })
}

/// Text tokens of a sequence (everything after the prefix, up to eos).
pub fn decode(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    vocab.decode(&seq.ids[seq.instruction_length.min(seq.ids.len())..])
}

#[derive(Debug, Clone)]
pub struct ArNet {
    cfg: ArConfig,
    token_embedding: usize,
    position_embedding: Option<usize>,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    head: Linear,
}

impl ArNet {
    /// Lays out and initializes parameters.
    pub fn init<R: Rng + ?Sized>(cfg: ArConfig, rng: &mut R) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let d = cfg.embedding_dim;
        let mut params = ParamSet::new();
        let token_embedding =
            params.push_normal("token_embedding", (cfg.vocab_size, d), 0.5, true, rng);
        let position_embedding = match cfg.positional {
            PositionalEncoding::Learned => Some(params.push_normal(
                "position_embedding",
                (cfg.max_sequence_length, d),
                0.5,
                false,
                rng,
            )),
            PositionalEncoding::Sinusoidal => None,
        };
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut params,
                    &format!("block{i}"),
                    d,
                    cfg.num_heads,
                    cfg.ff_mult * d,
                    rng,
                )
            })
            .collect();
        let final_norm = LayerNorm::new(&mut params, "final_norm", d);
        let head = Linear::new(
            &mut params,
            "head",
            d,
            cfg.vocab_size,
            true,
            0.1 / (d as f64).sqrt(),
            rng,
        );
        Ok((
            Self {
                cfg,
                token_embedding,
                position_embedding,
                blocks,
                final_norm,
                head,
            },
            params,
        ))
    }

    /// Rebuilds the layout for `cfg` and checks that `params` matches it.
    pub fn from_params(cfg: ArConfig, params: &ParamSet) -> Result<Self> {
        let (net, fresh) = Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&fresh, params)?;
        Ok(net)
    }

    pub fn config(&self) -> &ArConfig {
        &self.cfg
    }

    /// `ids.len() x V` next-token logits.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        ids: &[usize],
    ) -> Result<Var> {
        if ids.len() > self.cfg.max_sequence_length {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_sequence_length {}",
                ids.len(),
                self.cfg.max_sequence_length
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        let emb = g.param(params, self.token_embedding);
        let mut h = g.gather(emb, ids);
        let pos = match self.position_embedding {
            Some(p) => {
                let table = g.param(params, p);
                let positions: Vec<usize> = (0..ids.len()).collect();
                g.gather(table, &positions)
            }
            None => g.constant(sinusoidal(ids.len(), self.cfg.embedding_dim, 0)),
        };
        h = g.add(h, pos);
        for block in &self.blocks {
            h = block.forward(g, params, h, true);
        }
        let h = self.final_norm.forward(g, params, h);
        Ok(self.head.forward(g, params, h))
    }

    pub fn logits(&self, params: &ParamSet, ids: &[usize]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, ids)?;
        Ok(g.value(out).clone())
    }

    fn targets(&self, seq: &TokenSequence) -> Vec<Option<usize>> {
        let len = seq.content_len();
        (0..len)
            .map(|i| {
                let next = i + 1;
                if next >= len || (self.cfg.mask_instruction && next < seq.instruction_length) {
                    None
                } else {
                    Some(seq.ids[next])
                }
            })
            .collect()
    }

    fn loss_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        seq: &TokenSequence,
    ) -> Result<Option<Var>> {
        let len = seq.content_len();
        let targets = self.targets(seq);
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Ok(None);
        }
        let logits = self.forward(g, params, &seq.ids[..len])?;
        let total = g.cross_entropy(logits, &targets);
        Ok(Some(g.scale(total, 1.0 / count as f64)))
    }

    /// Mean next-token negative log-likelihood over non-pad positions.
    pub fn example_loss(&self, params: &ParamSet, seq: &TokenSequence) -> Result<f64> {
        let mut g = Graph::new();
        let loss = match self.loss_graph(&mut g, params, seq)? {
            Some(v) => g.scalar(v),
            None => 0.0,
        };
        finite(loss)
    }

    /// Per-example losses of a batch.
    pub fn nll_loss(&self, params: &ParamSet, batch: &[TokenSequence]) -> Result<Vec<f64>> {
        batch
            .par_iter()
            .map(|s| self.example_loss(params, s))
            .collect()
    }

    /// Natural-log probability of every scored next token.
    pub fn token_log_probs(&self, params: &ParamSet, seq: &TokenSequence) -> Result<Vec<f64>> {
        let len = seq.content_len();
        let logits = self.logits(params, &seq.ids[..len])?;
        let mut out = Vec::new();
        for (row, target) in logits.axis_iter(Axis(0)).zip(self.targets(seq)) {
            let Some(t) = target else { continue };
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let log_z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.push(row[t] - log_z);
        }
        Ok(out)
    }

    /// Samples continuation ids after `prefix` until eos or a length bound.
    pub fn sample_ids<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        prefix: &[usize],
        sampling: &SamplingConfig,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        sampling.validate()?;
        let mut ids = prefix.to_vec();
        let mut generated = Vec::new();
        while generated.len() < sampling.max_new_tokens && ids.len() < self.cfg.max_sequence_length
        {
            let logits = self.logits(params, &ids)?;
            let last = logits.row(ids.len() - 1);
            let next = sample_top_k(last.as_slice().unwrap_or(&last.to_vec()), sampling, rng);
            if next == EOS {
                break;
            }
            generated.push(next);
            ids.push(next);
        }
        Ok(generated)
    }
}

impl Objective for ArNet {
    type Example = TokenSequence;

    fn loss_and_grad(
        &self,
        params: &ParamSet,
        seq: &TokenSequence,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let Some(loss) = self.loss_graph(&mut g, params, seq)? else {
            return Ok((0.0, vec![0.0; params.num_scalars()]));
        };
        let value = finite(g.scalar(loss))?;
        let grads = g.backward(loss);
        Ok((value, g.param_gradient(&grads, params)))
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite loss {v}")))
    }
}

pub(crate) fn check_layout(expected: &ParamSet, actual: &ParamSet) -> Result<()> {
    if expected.len() != actual.len()
        || expected
            .iter()
            .zip(actual.iter())
            .any(|(a, b)| a.name != b.name || a.value.dim() != b.value.dim())
    {
        return Err(Error::Config(
            "parameters do not match the model configuration".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            temperature: 1.0,
            top_k: 50,
        }
    }
}

impl SamplingConfig {
    /// `top_k` above the vocabulary size samples from the full distribution.
    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Top-k sampling with temperature; padding, separator and unknown ids are
/// never emitted. Ties in the ranking favor the lower id.
fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], sampling: &SamplingConfig, rng: &mut R) -> usize {
    let mut ranked: Vec<usize> = (0..logits.len())
        .filter(|&i| i != PAD && i != SEP && i != UNK)
        .collect();
    ranked.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ranked.truncate(sampling.top_k.max(1));
    if ranked.len() == 1 {
        return ranked[0];
    }
    let top = logits[ranked[0]];
    let weights: Vec<f64> = ranked
        .iter()
        .map(|&i| ((logits[i] - top) / sampling.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in ranked.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *ranked.last().unwrap_or(&EOS)
}

/// A trained autoregressive generator: architecture, weights and vocabulary.
#[derive(Debug, Clone)]
pub struct ArModel {
    pub net: ArNet,
    pub params: ParamSet,
    pub vocab: Vocabulary,
    pub sampling: SamplingConfig,
    pub name: String,
}

impl ArModel {
    pub fn encode(&self, instruction: &str, text: &str) -> Result<TokenSequence> {
        encode(
            &self.vocab,
            instruction,
            text,
            self.net.cfg.max_sequence_length,
        )
    }

    pub fn generate_with<R: Rng + ?Sized>(
        &self,
        instruction: &str,
        sampling: &SamplingConfig,
        rng: &mut R,
    ) -> Result<String> {
        let mut prefix = self.vocab.encode_words(instruction);
        prefix.push(SEP);
        if prefix.len() > self.net.cfg.max_sequence_length {
            return Err(Error::Data(
                "instruction longer than the model context".into(),
            ));
        }
        let ids = self.net.sample_ids(&self.params, &prefix, sampling, rng)?;
        Ok(self.vocab.decode(&ids))
    }
}

impl TextGenerator for ArModel {
    fn generator_id(&self) -> String {
        self.name.clone()
    }

    fn generate(&self, instruction: &str, rng: &mut ChaCha8Rng) -> Result<String> {
        self.generate_with(instruction, &self.sampling, rng)
    }
}

impl TokenScorer for ArModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Scores `<sep> text <eos>` unconditionally: one log-probability per
    /// text token plus end-of-sequence.
    fn token_log_probs(&self, text: &str) -> Result<Vec<f64>> {
        let seq = encode(&self.vocab, "", text, self.net.cfg.max_sequence_length)?;
        self.net.token_log_probs(&self.params, &seq)
    }
}
