//! Generators: a causal transformer language model and a partial-noising
//! text diffusion model, both built on the shared autograd tape.

pub mod autoregressive;
pub mod diffusion;
pub mod schedule;
pub mod transformer;
pub mod vocab;

pub use autoregressive::{
    encode, ArConfig, ArModel, ArNet, PositionalEncoding, SamplingConfig, TokenSequence,
};
pub use diffusion::{
    condition_ids, diffusion_loss, encode_pair, encode_span, reverse_sample, round_to_tokens,
    span_mask, span_pretrain, Denoiser, DiffusionConfig, DiffusionExample, DiffusionModel,
    DiffusionNet, LearnedDenoiser, LossParts, LossWeights, NoiseDraw, PretrainSettings,
    PublicCorpus, TargetMask,
};
pub use schedule::{forward_noising, forward_step, posterior_step, sqrt_schedule, NoiseSchedule};
pub use vocab::{Vocabulary, EOS, PAD, SEP, UNK};
