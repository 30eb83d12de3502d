use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::privacy::{
    calibrate_noise_with_orders, compose, default_orders, epsilon_serde, to_epsilon_delta,
    PrivacyBudget, RdpCurve,
};
use crate::seed::rng_for;

use super::mechanism::{
    clip_gradient, poisson_lot, privatize_lot, DpSgdConfig, Lot, PerExampleGradient,
};

/// A per-example differentiable loss over a parameter collection.
///
/// `rng` is a stream private to one (step, example) pair, so objectives that
/// sample (diffusion timesteps, noise) stay deterministic under parallelism.
pub trait Objective: Sync {
    type Example: Sync;

    fn loss_and_grad(
        &self,
        params: &ParamSet,
        example: &Self::Example,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)>;

    fn loss(
        &self,
        params: &ParamSet,
        example: &Self::Example,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        self.loss_and_grad(params, example, rng).map(|r| r.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParamSet,
    pub step: u64,
    /// `None` when no accounting applies (σ = 0 or non-private training).
    pub accountant_curve: Option<RdpCurve>,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(params: ParamSet, rng_seed: u64) -> Self {
        Self {
            params,
            step: 0,
            accountant_curve: None,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    #[serde(with = "epsilon_serde")]
    pub epsilon_so_far: f64,
}

/// Per-step statistics returned alongside the new state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean_loss: f64,
    pub lot_size: usize,
}

fn zero_frozen(grad: &mut [f64], mask: &[bool]) {
    for (g, &m) in grad.iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
}

fn per_example<O: Objective>(
    objective: &O,
    params: &ParamSet,
    examples: &[O::Example],
    indices: &[usize],
    seed: u64,
    step: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    indices
        .par_iter()
        .map(|&i| {
            let example = examples
                .get(i)
                .ok_or_else(|| Error::Contract(format!("lot index {i} outside dataset")))?;
            let mut rng = rng_for(
                seed,
                "example",
                step.wrapping_mul(1 << 32).wrapping_add(i as u64),
            );
            objective.loss_and_grad(params, example, &mut rng)
        })
        .collect()
}

/// One DP-SGD update on the given lot.
///
/// Per-example gradients come from microbatch-of-one evaluation, are clipped
/// to `C` over all trainable coordinates jointly, summed, noised and divided
/// by the expected lot size. The accountant advances by one subsampled
/// Gaussian step even when the lot is empty.
pub fn dp_sgd_step<O: Objective>(
    state: TrainState,
    lot: &Lot,
    objective: &O,
    examples: &[O::Example],
    config: &DpSgdConfig,
    learning_rate: f64,
) -> Result<(TrainState, StepStats)> {
    let shared = state.params.unfrozen_shared();
    if !shared.is_empty() {
        return Err(Error::Contract(format!(
            "parameters without per-example gradients must be frozen for DP-SGD: {}",
            shared.join(", ")
        )));
    }
    let TrainState {
        mut params,
        step,
        rng_seed,
        ..
    } = state;
    let mask = params.trainable_mask();
    let dim = params.num_scalars();

    let results = per_example(objective, &params, examples, &lot.indices, rng_seed, step)?;
    let mut loss_sum = 0.0;
    let clipped: Vec<PerExampleGradient> = results
        .into_iter()
        .map(|(loss, mut grad)| {
            loss_sum += loss;
            zero_frozen(&mut grad, &mask);
            clip_gradient(&PerExampleGradient::new(grad), config.clip_norm)
        })
        .collect();

    let mut noise_rng = rng_for(rng_seed, "noise", step);
    let update = privatize_lot(&clipped, dim, config, Some(&mask), &mut noise_rng)?;
    params.apply_update(&update, learning_rate);

    let next_step = step + 1;
    let accountant_curve = if config.noise_multiplier > 0.0 {
        let per_step = RdpCurve::subsampled_gaussian(
            default_orders(),
            config.sample_rate,
            config.noise_multiplier,
        )?;
        Some(compose(&per_step, next_step))
    } else {
        None
    };
    let stats = StepStats {
        mean_loss: if lot.is_empty() {
            0.0
        } else {
            loss_sum / lot.len() as f64
        },
        lot_size: lot.len(),
    };
    Ok((
        TrainState {
            params,
            step: next_step,
            accountant_curve,
            rng_seed,
        },
        stats,
    ))
}

/// Plain minibatch SGD step: mean of unclipped per-example gradients.
pub fn sgd_step<O: Objective>(
    state: TrainState,
    batch: &[usize],
    objective: &O,
    examples: &[O::Example],
    learning_rate: f64,
) -> Result<(TrainState, StepStats)> {
    let TrainState {
        mut params,
        step,
        rng_seed,
        accountant_curve,
    } = state;
    let mask = params.trainable_mask();
    let results = per_example(objective, &params, examples, batch, rng_seed, step)?;
    let mut sum = vec![0.0; params.num_scalars()];
    let mut loss_sum = 0.0;
    for (loss, grad) in results {
        loss_sum += loss;
        for (s, g) in sum.iter_mut().zip(&grad) {
            *s += g;
        }
    }
    zero_frozen(&mut sum, &mask);
    let n = batch.len().max(1) as f64;
    for s in &mut sum {
        *s /= n;
    }
    params.apply_update(&sum, learning_rate);
    Ok((
        TrainState {
            params,
            step: step + 1,
            accountant_curve,
            rng_seed,
        },
        StepStats {
            mean_loss: loss_sum / n,
            lot_size: batch.len(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub clip_norm: f64,
    pub expected_lot_size: f64,
    pub epochs: u64,
    /// Overrides `epochs · ⌈N/L⌉` when set.
    #[serde(default)]
    pub num_steps: Option<u64>,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            expected_lot_size: 64.0,
            epochs: 4,
            num_steps: None,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub realized: PrivacyBudget,
    /// `None` for the non-private path.
    pub config: Option<DpSgdConfig>,
    pub best_order: Option<f64>,
    pub log: Vec<LogEntry>,
}

fn resolve_steps(n: usize, settings: &TrainSettings) -> Result<(f64, u64)> {
    if n == 0 {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    let lot = settings.expected_lot_size.min(n as f64);
    if !(lot > 0.0) {
        return Err(Error::Domain("expected lot size must be positive".into()));
    }
    let steps = settings
        .num_steps
        .unwrap_or(settings.epochs * (n as f64 / lot).ceil() as u64);
    if steps == 0 {
        return Err(Error::Domain("training needs at least one step".into()));
    }
    Ok((lot, steps))
}

/// Trains `params` on `examples` under `budget`.
///
/// Finite ε: freezes shared parameters, calibrates σ for
/// `(q = L/N, T = epochs·⌈N/L⌉)` and runs Poisson-sampled DP-SGD.
/// ε = ∞: shuffled minibatch SGD without clipping or noise.
pub fn train<O: Objective>(
    objective: &O,
    params: ParamSet,
    examples: &[O::Example],
    settings: &TrainSettings,
    budget: PrivacyBudget,
    seed: u64,
) -> Result<TrainOutcome> {
    let n = examples.len();
    let (lot_size, steps) = resolve_steps(n, settings)?;

    if !budget.is_private() {
        let mut state = TrainState::new(params, seed);
        let mut log = Vec::with_capacity(steps as usize);
        let batch = lot_size.round().max(1.0) as usize;
        let mut order: Vec<usize> = Vec::new();
        let mut epoch = 0u64;
        while state.step < steps {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut rng_for(seed, "shuffle", epoch));
                order.reverse();
                epoch += 1;
            }
            let take = batch.min(order.len());
            let chunk: Vec<usize> = (0..take).filter_map(|_| order.pop()).collect();
            let (next, stats) =
                sgd_step(state, &chunk, objective, examples, settings.learning_rate)?;
            state = next;
            log.push(LogEntry {
                step: state.step,
                loss: stats.mean_loss,
                epsilon_so_far: f64::INFINITY,
            });
        }
        return Ok(TrainOutcome {
            state,
            realized: PrivacyBudget::non_private(),
            config: None,
            best_order: None,
            log,
        });
    }

    let sample_rate = lot_size / n as f64;
    let orders = default_orders();
    let sigma = calibrate_noise_with_orders(budget, sample_rate, steps, &orders)?;
    let config = DpSgdConfig::new(settings.clip_norm, sigma, sample_rate, steps, lot_size)?;

    let mut params = params;
    params.freeze_shared();
    let mut state = TrainState::new(params, seed);
    let mut log = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let lot = poisson_lot(n, sample_rate, &mut rng_for(seed, "lot", state.step))?;
        let (next, stats) = dp_sgd_step(
            state,
            &lot,
            objective,
            examples,
            &config,
            settings.learning_rate,
        )?;
        state = next;
        let curve = state
            .accountant_curve
            .as_ref()
            .ok_or_else(|| Error::Contract("private step produced no accountant state".into()))?;
        let (eps, _) = to_epsilon_delta(curve, budget.delta)?;
        log.push(LogEntry {
            step: state.step,
            loss: stats.mean_loss,
            epsilon_so_far: eps,
        });
    }
    let curve = state
        .accountant_curve
        .as_ref()
        .ok_or_else(|| Error::Contract("private training produced no accountant state".into()))?;
    let (eps, order) = to_epsilon_delta(curve, budget.delta)?;
    Ok(TrainOutcome {
        realized: PrivacyBudget {
            epsilon: eps,
            delta: budget.delta,
        },
        state,
        config: Some(config),
        best_order: Some(order),
        log,
    })
}
