//! Sequence-to-sequence text diffusion with partial noising.
//!
//! Condition tokens (instruction and separator) stay as exact embeddings;
//! only target rows are corrupted and denoised. The network predicts `ẑ_0`
//! directly and may additionally see its own previous estimate
//! (self-conditioning).

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dpsgd::{train, Objective, TrainOutcome, TrainSettings};
use crate::error::{Error, Result};
use crate::eval::TextGenerator;
use crate::params::ParamSet;
use crate::privacy::PrivacyBudget;
use crate::seed::rng_for;

use super::autoregressive::check_layout;
use super::schedule::{posterior_step, sqrt_schedule, NoiseSchedule, DEFAULT_OFFSET};
use super::transformer::{sinusoidal, LayerNorm, Linear, TransformerBlock};
use super::vocab::{Vocabulary, EOS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub rounding: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            rounding: 1.0,
            prior: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub vocab_size: usize,
    /// Width of the token embedding space the chain runs in.
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_sequence_length: usize,
    /// Target positions generated per sample, including eos and padding.
    pub target_length: usize,
    pub diffusion_steps: usize,
    #[serde(default = "default_offset")]
    pub schedule_offset: f64,
    #[serde(default)]
    pub self_conditioning: bool,
    #[serde(default = "default_clamp")]
    pub clamp: bool,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

fn default_offset() -> f64 {
    DEFAULT_OFFSET
}

fn default_clamp() -> bool {
    true
}

impl DiffusionConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 16,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 4,
            max_sequence_length: 24,
            target_length: 12,
            diffusion_steps: 200,
            schedule_offset: DEFAULT_OFFSET,
            self_conditioning: false,
            clamp: true,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SEP {
            return Err(Error::Config(
                "vocabulary must hold more than the reserved tokens".into(),
            ));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.target_length == 0 || self.target_length >= self.max_sequence_length {
            return Err(Error::Config(
                "target_length must lie in 1..max_sequence_length".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        sqrt_schedule(self.diffusion_steps, self.schedule_offset)
    }
}

/// Which positions a training example corrupts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetMask {
    Fixed {
        mask: Vec<bool>,
    },
    /// One contiguous span of `round(fraction · len)` positions, placed
    /// uniformly at random on every evaluation.
    RandomSpan {
        fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionExample {
    pub ids: Vec<usize>,
    pub mask: TargetMask,
}

impl DiffusionExample {
    pub fn resolve_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<bool>> {
        match &self.mask {
            TargetMask::Fixed { mask } => {
                if mask.len() != self.ids.len() {
                    return Err(Error::Contract(
                        "target mask length differs from sequence".into(),
                    ));
                }
                Ok(mask.clone())
            }
            TargetMask::RandomSpan { fraction } => Ok(span_mask(self.ids.len(), *fraction, rng)),
        }
    }
}

pub fn span_mask<R: Rng + ?Sized>(len: usize, fraction: f64, rng: &mut R) -> Vec<bool> {
    let span = ((fraction.clamp(0.0, 1.0) * len as f64).round() as usize).min(len);
    let start = if span == 0 || span == len {
        0
    } else {
        rng.random_range(0..=len - span)
    };
    (0..len).map(|i| i >= start && i < start + span).collect()
}

/// `⟨instruction, sep | text, eos, pad…⟩` with the target block of fixed
/// width `target_length`.
pub fn encode_pair(
    vocab: &Vocabulary,
    instruction: &str,
    text: &str,
    cfg: &DiffusionConfig,
) -> Result<DiffusionExample> {
    let mut ids = condition_ids(vocab, instruction, cfg)?;
    let prefix = ids.len();
    let mut target = vocab.encode_words(text);
    target.truncate(cfg.target_length - 1);
    target.push(EOS);
    target.resize(cfg.target_length, PAD);
    ids.extend(target);
    let mask = (0..ids.len()).map(|i| i >= prefix).collect();
    Ok(DiffusionExample {
        ids,
        mask: TargetMask::Fixed { mask },
    })
}

pub fn condition_ids(
    vocab: &Vocabulary,
    instruction: &str,
    cfg: &DiffusionConfig,
) -> Result<Vec<usize>> {
    let mut ids = vocab.encode_words(instruction);
    ids.push(SEP);
    if ids.len() + cfg.target_length > cfg.max_sequence_length {
        return Err(Error::Data(format!(
            "instruction takes {} tokens with separator, only {} fit beside the target block",
            ids.len(),
            cfg.max_sequence_length - cfg.target_length
        )));
    }
    Ok(ids)
}

/// Plain span-corruption example over a whole public text.
pub fn encode_span(
    vocab: &Vocabulary,
    text: &str,
    fraction: f64,
    max_len: usize,
) -> DiffusionExample {
    let mut ids = vocab.encode_words(text);
    ids.push(EOS);
    ids.truncate(max_len);
    DiffusionExample {
        ids,
        mask: TargetMask::RandomSpan { fraction },
    }
}

/// Loss decomposition, each term averaged over target positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub rounding: f64,
    pub prior: f64,
    pub total: f64,
}

/// Per-call inputs that the objective otherwise samples.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    /// Standard normal draws, one row per position (non-target rows ignored).
    pub noise: Array2<f64>,
    /// Previous `ẑ_0` estimate for self-conditioning; `None` leaves the
    /// self-conditioning path out of the graph entirely.
    pub previous: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct DiffusionNet {
    cfg: DiffusionConfig,
    schedule: NoiseSchedule,
    embedding: usize,
    position: usize,
    segment: usize,
    input: Linear,
    self_cond: Option<Linear>,
    time: Linear,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    output: Linear,
}

impl DiffusionNet {
    pub fn init<R: Rng + ?Sized>(cfg: DiffusionConfig, rng: &mut R) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let (e, h) = (cfg.embedding_dim, cfg.hidden_dim);
        let mut params = ParamSet::new();
        let embedding = params.push_normal("embedding", (cfg.vocab_size, e), 1.0, true, rng);
        let position = params.push_normal(
            "position_embedding",
            (cfg.max_sequence_length, h),
            0.1,
            false,
            rng,
        );
        let segment = params.push_normal("segment_embedding", (2, h), 0.1, true, rng);
        let in_std = 1.0 / (e as f64).sqrt();
        let input = Linear::new(&mut params, "input", e, h, true, in_std, rng);
        let self_cond = cfg
            .self_conditioning
            .then(|| Linear::new(&mut params, "self_cond", e, h, false, in_std, rng));
        let time = Linear::new(
            &mut params,
            "time",
            h,
            h,
            false,
            1.0 / (h as f64).sqrt(),
            rng,
        );
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut params,
                    &format!("block{i}"),
                    h,
                    cfg.num_heads,
                    2 * h,
                    rng,
                )
            })
            .collect();
        let final_norm = LayerNorm::new(&mut params, "final_norm", h);
        let output = Linear::new(
            &mut params,
            "output",
            h,
            e,
            true,
            1.0 / (h as f64).sqrt(),
            rng,
        );
        Ok((
            Self {
                cfg,
                schedule,
                embedding,
                position,
                segment,
                input,
                self_cond,
                time,
                blocks,
                final_norm,
                output,
            },
            params,
        ))
    }

    pub fn from_params(cfg: DiffusionConfig, params: &ParamSet) -> Result<Self> {
        let (net, fresh) = Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&fresh, params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn embedding_index(&self) -> usize {
        self.embedding
    }

    /// Predicts `ẑ_0` for every row of `z` (the caller reads target rows).
    fn denoise<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        z: Var,
        t: usize,
        mask: &[bool],
        previous: Option<&Array2<f64>>,
    ) -> Result<Var> {
        let len = mask.len();
        if len > self.cfg.max_sequence_length {
            return Err(Error::Contract(format!(
                "sequence of {len} positions exceeds max_sequence_length {}",
                self.cfg.max_sequence_length
            )));
        }
        let mut h = self.input.forward(g, params, z);
        if let (Some(layer), Some(prev)) = (&self.self_cond, previous) {
            let prev = g.constant(prev.clone());
            let extra = layer.forward(g, params, prev);
            h = g.add(h, extra);
        }
        let pos_table = g.param(params, self.position);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &positions);
        h = g.add(h, pos);
        let seg_table = g.param(params, self.segment);
        let segments: Vec<usize> = mask.iter().map(|&m| usize::from(m)).collect();
        let seg = g.gather(seg_table, &segments);
        h = g.add(h, seg);
        let time_features = g.constant(sinusoidal(1, self.cfg.hidden_dim, t));
        let time = self.time.forward(g, params, time_features);
        h = g.add_row(h, time);
        for block in &self.blocks {
            h = block.forward(g, params, h, false);
        }
        let h = self.final_norm.forward(g, params, h);
        Ok(self.output.forward(g, params, h))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            Some(bad) => Err(Error::Contract(format!(
                "token id {bad} outside vocabulary"
            ))),
            None => Ok(()),
        }
    }

    /// Builds the loss on the tape; `None` when the mask selects nothing.
    fn loss_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        ids: &[usize],
        mask: &[bool],
        draw: &NoiseDraw,
    ) -> Result<Option<(Var, [Var; 3])>> {
        self.check_ids(ids)?;
        self.schedule.check_step(draw.t)?;
        if mask.len() != ids.len()
            || draw.noise.nrows() != ids.len()
            || draw.noise.ncols() != self.cfg.embedding_dim
        {
            return Err(Error::Contract(
                "mask or noise shape differs from the sequence".into(),
            ));
        }
        let targets: Vec<usize> = (0..ids.len()).filter(|&i| mask[i]).collect();
        if targets.is_empty() {
            return Ok(None);
        }
        let n = targets.len() as f64;
        let ab = self.schedule.alpha_bar(draw.t);
        let ab_final = self.schedule.alpha_bar(self.schedule.num_steps);

        let table = g.param(params, self.embedding);
        let z0 = g.gather(table, ids);
        let scales: Vec<Option<f64>> = mask.iter().map(|&m| m.then_some(ab.sqrt())).collect();
        let noise = draw.noise.mapv(|v| v * (1.0 - ab).sqrt());
        let zt = g.partial_noise(z0, &scales, &noise);
        let pred = self.denoise(g, params, zt, draw.t, mask, draw.previous.as_ref())?;

        let pred_t = g.gather(pred, &targets);
        let z0_t = g.gather(z0, &targets);
        let neg = g.scale(z0_t, -1.0);
        let diff = g.add(pred_t, neg);
        let mse = g.sum_squares(diff);
        let mse = g.scale(mse, 1.0 / n);

        let logits = g.neg_sq_dist(z0_t, table);
        let gold: Vec<Option<usize>> = targets.iter().map(|&i| Some(ids[i])).collect();
        let rounding = g.cross_entropy(logits, &gold);
        let rounding = g.scale(rounding, 1.0 / n);

        let prior = g.sum_squares(z0_t);
        let prior = g.scale(prior, ab_final / n);

        let w = self.cfg.loss_weights;
        let a = g.scale(mse, w.mse);
        let b = g.scale(rounding, w.rounding);
        let c = g.scale(prior, w.prior);
        let ab_sum = g.add(a, b);
        let total = g.add(ab_sum, c);
        Ok(Some((total, [mse, rounding, prior])))
    }

    /// Loss terms for an explicit timestep and noise draw.
    pub fn loss_parts(
        &self,
        params: &ParamSet,
        ids: &[usize],
        mask: &[bool],
        draw: &NoiseDraw,
    ) -> Result<LossParts> {
        let mut g = Graph::new();
        let parts = match self.loss_graph(&mut g, params, ids, mask, draw)? {
            Some((total, [m, r, p])) => LossParts {
                mse: g.scalar(m),
                rounding: g.scalar(r),
                prior: g.scalar(p),
                total: g.scalar(total),
            },
            None => LossParts {
                mse: 0.0,
                rounding: 0.0,
                prior: 0.0,
                total: 0.0,
            },
        };
        for v in [parts.mse, parts.rounding, parts.prior, parts.total] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite diffusion loss term {v}"
                )));
            }
        }
        Ok(parts)
    }

    pub fn loss_and_grad_with(
        &self,
        params: &ParamSet,
        ids: &[usize],
        mask: &[bool],
        draw: &NoiseDraw,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let Some((total, _)) = self.loss_graph(&mut g, params, ids, mask, draw)? else {
            return Ok((0.0, vec![0.0; params.num_scalars()]));
        };
        let value = g.scalar(total);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite diffusion loss {value}")));
        }
        let grads = g.backward(total);
        Ok((value, g.param_gradient(&grads, params)))
    }

    /// Samples the timestep, noise and (when enabled, with probability ½) a
    /// detached self-conditioning estimate.
    pub fn sample_draw<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        ids: &[usize],
        mask: &[bool],
        rng: &mut R,
    ) -> Result<NoiseDraw> {
        let t = rng.random_range(1..=self.schedule.num_steps);
        let noise = Array2::from_shape_simple_fn((ids.len(), self.cfg.embedding_dim), || {
            rng.sample(StandardNormal)
        });
        let mut draw = NoiseDraw {
            t,
            noise,
            previous: None,
        };
        if self.cfg.self_conditioning {
            let zeros = Array2::zeros((ids.len(), self.cfg.embedding_dim));
            draw.previous = Some(zeros);
            if rng.random_bool(0.5) {
                let estimate = self.first_pass(params, ids, mask, &draw)?;
                draw.previous = Some(estimate);
            }
        }
        Ok(draw)
    }

    fn first_pass(
        &self,
        params: &ParamSet,
        ids: &[usize],
        mask: &[bool],
        draw: &NoiseDraw,
    ) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let ab = self.schedule.alpha_bar(draw.t);
        let table = g.param(params, self.embedding);
        let z0 = g.gather(table, ids);
        let scales: Vec<Option<f64>> = mask.iter().map(|&m| m.then_some(ab.sqrt())).collect();
        let noise = draw.noise.mapv(|v| v * (1.0 - ab).sqrt());
        let zt = g.partial_noise(z0, &scales, &noise);
        let pred = self.denoise(&mut g, params, zt, draw.t, mask, draw.previous.as_ref())?;
        let mut out = g.value(pred).clone();
        for (mut row, _) in out.rows_mut().into_iter().zip(mask).filter(|(_, &m)| !m) {
            row.fill(0.0);
        }
        Ok(out)
    }

    /// Mean loss over `examples`, with draws derived from `seed` per example
    /// index so different parameter sets are compared on identical noise.
    pub fn validation_loss(
        &self,
        params: &ParamSet,
        examples: &[DiffusionExample],
        seed: u64,
    ) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let losses: Vec<f64> = examples
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut rng = rng_for(seed, "validation", i as u64);
                let mask = ex.resolve_mask(&mut rng)?;
                let draw = self.sample_draw(params, &ex.ids, &mask, &mut rng)?;
                self.loss_parts(params, &ex.ids, &mask, &draw)
                    .map(|p| p.total)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

impl DiffusionNet {
    /// Per-example totals for a batch with explicit draws.
    pub fn loss_batch(
        &self,
        params: &ParamSet,
        batch: &[(Vec<usize>, Vec<bool>, NoiseDraw)],
    ) -> Result<Vec<f64>> {
        batch
            .par_iter()
            .map(|(ids, mask, draw)| self.loss_parts(params, ids, mask, draw).map(|p| p.total))
            .collect()
    }
}

impl Objective for DiffusionNet {
    type Example = DiffusionExample;

    fn loss_and_grad(
        &self,
        params: &ParamSet,
        example: &DiffusionExample,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let mask = example.resolve_mask(rng)?;
        let draw = self.sample_draw(params, &example.ids, &mask, rng)?;
        self.loss_and_grad_with(params, &example.ids, &mask, &draw)
    }
}

/// `argmin_w ‖z_i − E_w‖²` per row; ties go to the lowest id.
pub fn round_to_tokens(z: &Array2<f64>, embedding: &Array2<f64>) -> Vec<usize> {
    let norms: Vec<f64> = embedding.rows().into_iter().map(|r| r.dot(&r)).collect();
    z.rows()
        .into_iter()
        .map(|row| {
            let mut best = (f64::INFINITY, 0);
            for (w, e) in embedding.rows().into_iter().enumerate() {
                let d = row.dot(&row) - 2.0 * row.dot(&e) + norms[w];
                let d = if d.is_nan() { f64::INFINITY } else { d };
                if d < best.0 {
                    best = (d, w);
                }
            }
            best.1
        })
        .collect()
}

/// What the reverse chain needs from a model.
pub trait Denoiser {
    fn embedding(&self) -> &Array2<f64>;
    fn predict_z0(
        &self,
        z: &Array2<f64>,
        t: usize,
        mask: &[bool],
        previous: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>>;
    fn self_conditioning(&self) -> bool {
        false
    }
}

/// Loss terms for any denoiser, evaluated without gradients.
pub fn diffusion_loss<D: Denoiser>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    ids: &[usize],
    mask: &[bool],
    draw: &NoiseDraw,
) -> Result<LossParts> {
    schedule.check_step(draw.t)?;
    let emb = denoiser.embedding();
    if ids.iter().any(|&id| id >= emb.nrows())
        || mask.len() != ids.len()
        || draw.noise.dim() != (ids.len(), emb.ncols())
    {
        return Err(Error::Contract(
            "ids, mask or noise inconsistent with the embedding table".into(),
        ));
    }
    let targets: Vec<usize> = (0..ids.len()).filter(|&i| mask[i]).collect();
    if targets.is_empty() {
        return Ok(LossParts {
            mse: 0.0,
            rounding: 0.0,
            prior: 0.0,
            total: 0.0,
        });
    }
    let n = targets.len() as f64;
    let ab = schedule.alpha_bar(draw.t);
    let mut z0 = Array2::zeros((ids.len(), emb.ncols()));
    for (i, &id) in ids.iter().enumerate() {
        z0.row_mut(i).assign(&emb.row(id));
    }
    let mut zt = z0.clone();
    for &i in &targets {
        for (j, v) in zt.row_mut(i).iter_mut().enumerate() {
            *v = ab.sqrt() * *v + draw.noise[[i, j]] * (1.0 - ab).sqrt();
        }
    }
    let pred = denoiser.predict_z0(&zt, draw.t, mask, draw.previous.as_ref())?;
    let mut mse = 0.0;
    let mut rounding = 0.0;
    let mut prior = 0.0;
    for &i in &targets {
        let row = z0.row(i);
        mse += (&pred.row(i) - &row).mapv(|d| d * d).sum();
        prior += row.dot(&row);
        let logits: Vec<f64> = emb
            .rows()
            .into_iter()
            .map(|e| -(&row - &e).mapv(|d| d * d).sum())
            .collect();
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        rounding += log_z - logits[ids[i]];
    }
    let ab_final = schedule.alpha_bar(schedule.num_steps);
    let (mse, rounding, prior) = (mse / n, rounding / n, ab_final * prior / n);
    let total = weights.mse * mse + weights.rounding * rounding + weights.prior * prior;
    if ![mse, rounding, prior, total].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite diffusion loss term".into()));
    }
    Ok(LossParts {
        mse,
        rounding,
        prior,
        total,
    })
}

/// A diffusion network bound to its parameters.
#[derive(Debug, Clone, Copy)]
pub struct LearnedDenoiser<'a> {
    pub net: &'a DiffusionNet,
    pub params: &'a ParamSet,
}

impl Denoiser for LearnedDenoiser<'_> {
    fn embedding(&self) -> &Array2<f64> {
        self.params.value(self.net.embedding)
    }

    fn predict_z0(
        &self,
        z: &Array2<f64>,
        t: usize,
        mask: &[bool],
        previous: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self
            .net
            .denoise(&mut g, self.params, zv, t, mask, previous)?;
        Ok(g.value(out).clone())
    }

    fn self_conditioning(&self) -> bool {
        self.net.cfg.self_conditioning
    }
}

/// Runs the reverse chain from Gaussian noise on `target_length` positions
/// after `condition`, returning the rounded target ids.
pub fn reverse_sample<D: Denoiser, R: Rng + ?Sized>(
    denoiser: &D,
    condition: &[usize],
    target_length: usize,
    schedule: &NoiseSchedule,
    clamp: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let emb = denoiser.embedding();
    if let Some(bad) = condition.iter().find(|&&id| id >= emb.nrows()) {
        return Err(Error::Contract(format!(
            "condition id {bad} outside vocabulary"
        )));
    }
    let dim = emb.ncols();
    let len = condition.len() + target_length;
    let mask: Vec<bool> = (0..len).map(|i| i >= condition.len()).collect();
    let mut z = Array2::zeros((len, dim));
    for (i, &id) in condition.iter().enumerate() {
        z.row_mut(i).assign(&emb.row(id));
    }
    for v in z.slice_mut(s![condition.len().., ..]) {
        *v = rng.sample(StandardNormal);
    }
    let mut previous = denoiser
        .self_conditioning()
        .then(|| Array2::zeros((len, dim)));
    for t in (1..=schedule.num_steps).rev() {
        let mut z0_hat = denoiser.predict_z0(&z, t, &mask, previous.as_ref())?;
        if clamp {
            let ids = round_to_tokens(&z0_hat.slice(s![condition.len().., ..]).to_owned(), emb);
            for (k, id) in ids.into_iter().enumerate() {
                z0_hat.row_mut(condition.len() + k).assign(&emb.row(id));
            }
        }
        if let Some(prev) = previous.as_mut() {
            prev.slice_mut(s![condition.len().., ..])
                .assign(&z0_hat.slice(s![condition.len().., ..]));
        }
        z = posterior_step(&z, &z0_hat, t, schedule, &mask, rng)?;
    }
    Ok(round_to_tokens(
        &z.slice(s![condition.len().., ..]).to_owned(),
        emb,
    ))
}

/// Corpus metadata guarding public pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicCorpus {
    pub name: String,
    pub texts: Vec<String>,
    /// Set for sensitive corpora; pretraining refuses them.
    pub private: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub span_fraction: f64,
    pub train: TrainSettings,
}

/// Non-private span-corruption pretraining. Returns the trained outcome;
/// the caller freezes positional embeddings before private fine-tuning.
pub fn span_pretrain(
    net: &DiffusionNet,
    params: ParamSet,
    vocab: &Vocabulary,
    corpus: &PublicCorpus,
    settings: &PretrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    if corpus.private {
        return Err(Error::PrivateCorpus(corpus.name.clone()));
    }
    if !(0.0..=1.0).contains(&settings.span_fraction) {
        return Err(Error::Domain(format!(
            "span fraction {} outside [0, 1]",
            settings.span_fraction
        )));
    }
    let examples: Vec<DiffusionExample> = corpus
        .texts
        .iter()
        .map(|t| {
            encode_span(
                vocab,
                t,
                settings.span_fraction,
                net.cfg.max_sequence_length,
            )
        })
        .collect();
    train(
        net,
        params,
        &examples,
        &settings.train,
        PrivacyBudget::non_private(),
        seed,
    )
}

/// A trained diffusion generator: network, weights and vocabulary.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub net: DiffusionNet,
    pub params: ParamSet,
    pub vocab: Vocabulary,
    pub name: String,
}

impl DiffusionModel {
    pub fn sample_ids<R: Rng + ?Sized>(
        &self,
        instruction: &str,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let condition = condition_ids(&self.vocab, instruction, &self.net.cfg)?;
        let denoiser = LearnedDenoiser {
            net: &self.net,
            params: &self.params,
        };
        reverse_sample(
            &denoiser,
            &condition,
            self.net.cfg.target_length,
            &self.net.schedule,
            self.net.cfg.clamp,
            rng,
        )
    }
}

impl TextGenerator for DiffusionModel {
    fn generator_id(&self) -> String {
        self.name.clone()
    }

    fn generate(&self, instruction: &str, rng: &mut ChaCha8Rng) -> Result<String> {
        let ids = self.sample_ids(instruction, rng)?;
        Ok(self.vocab.decode(&ids))
    }
}
