//! DP-SGD: Poisson lots, per-example clipping, Gaussian noising and
//! accountant bookkeeping, with a plain-SGD path for ε = ∞.

mod checkpoint;
mod engine;
mod mechanism;

pub use checkpoint::Checkpoint;
pub use engine::{
    dp_sgd_step, sgd_step, train, LogEntry, Objective, StepStats, TrainOutcome, TrainSettings,
    TrainState,
};
pub use mechanism::{
    clip_gradient, poisson_lot, privatize_lot, DpSgdConfig, Lot, PerExampleGradient, CLIP_TOLERANCE,
};
