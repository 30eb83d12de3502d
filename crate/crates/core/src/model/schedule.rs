//! Variance schedule and Gaussian transitions of the forward chain.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHA_BAR_MIN: f64 = 1e-5;
pub const ALPHA_BAR_MAX: f64 = 1.0 - 1e-5;
pub const DEFAULT_OFFSET: f64 = 1e-4;

/// Cumulative signal levels `ᾱ_0..=ᾱ_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub offset: f64,
    pub alpha_bar: Vec<f64>,
}

/// `ᾱ_t = clamp(1 − √(t/T + s))`.
pub fn sqrt_schedule(num_steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::Domain("diffusion needs at least one step".into()));
    }
    if !(offset >= 0.0 && offset < 1.0) {
        return Err(Error::Domain(format!(
            "schedule offset {offset} outside [0, 1)"
        )));
    }
    let alpha_bar = (0..=num_steps)
        .map(|t| {
            (1.0 - (t as f64 / num_steps as f64 + offset).sqrt())
                .clamp(ALPHA_BAR_MIN, ALPHA_BAR_MAX)
        })
        .collect();
    Ok(NoiseSchedule {
        num_steps,
        offset,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal level before step `t`. The chain starts from clean data, so
    /// the level before the first step is exactly 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Per-step retention `α_t = ᾱ_t / ᾱ_{t−1}`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar_prev(t)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::Domain(format!(
                "timestep {t} outside 1..={}",
                self.num_steps
            )));
        }
        Ok(())
    }
}

fn normal_row<R: Rng + ?Sized>(
    row: ndarray::ArrayViewMut1<f64>,
    mean_scale: f64,
    std: f64,
    rng: &mut R,
) {
    for v in row {
        let e: f64 = rng.sample(StandardNormal);
        *v = mean_scale * *v + std * e;
    }
}

/// Samples `z_t ~ q(z_t | z_0)` on target rows; other rows are copied.
pub fn forward_noising<R: Rng + ?Sized>(
    z0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    target_mask: &[bool],
    rng: &mut R,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_mask(z0, target_mask)?;
    let a = schedule.alpha_bar(t);
    let mut z = z0.clone();
    for (row, _) in z
        .rows_mut()
        .into_iter()
        .zip(target_mask)
        .filter(|(_, &m)| m)
    {
        normal_row(row, a.sqrt(), (1.0 - a).sqrt(), rng);
    }
    Ok(z)
}

/// One transition `z_t ~ q(z_t | z_{t−1})` on target rows.
pub fn forward_step<R: Rng + ?Sized>(
    z_prev: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    target_mask: &[bool],
    rng: &mut R,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_mask(z_prev, target_mask)?;
    let a = schedule.alpha(t);
    let mut z = z_prev.clone();
    for (row, _) in z
        .rows_mut()
        .into_iter()
        .zip(target_mask)
        .filter(|(_, &m)| m)
    {
        normal_row(row, a.sqrt(), (1.0 - a).sqrt(), rng);
    }
    Ok(z)
}

/// Samples `z_{t−1} ~ q(z_{t−1} | z_t, ẑ_0)` on target rows. At `t = 1` the
/// posterior is a point mass on `ẑ_0`.
pub fn posterior_step<R: Rng + ?Sized>(
    z_t: &Array2<f64>,
    z0_hat: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    target_mask: &[bool],
    rng: &mut R,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_mask(z_t, target_mask)?;
    let mut out = z_t.clone();
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar_prev(t);
    let alpha = schedule.alpha(t);
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let std = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt();
    for (i, _) in target_mask.iter().enumerate().filter(|(_, &m)| m) {
        let mut row = out.row_mut(i);
        if t == 1 {
            row.assign(&z0_hat.row(i));
            continue;
        }
        for (j, v) in row.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *v = c0 * z0_hat[[i, j]] + ct * z_t[[i, j]] + std * e;
        }
    }
    Ok(out)
}

fn check_mask(z: &Array2<f64>, mask: &[bool]) -> Result<()> {
    if z.nrows() != mask.len() {
        return Err(Error::Contract(format!(
            "target mask covers {} positions, tensor has {}",
            mask.len(),
            z.nrows()
        )));
    }
    Ok(())
}
