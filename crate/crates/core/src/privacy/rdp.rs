//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::budget::PrivacyBudget;

/// Per-order RDP values, the accountant's working state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    values: Vec<f64>,
}

/// Integer orders 2..=64 plus 128, 256 and 512.
pub fn default_orders() -> Vec<f64> {
    (2..=64)
        .map(f64::from)
        .chain([128.0, 256.0, 512.0])
        .collect()
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::Domain("RDP curve needs at least one order".into()));
        }
        if orders.len() != values.len() {
            return Err(Error::Domain(format!(
                "{} orders but {} values",
                orders.len(),
                values.len()
            )));
        }
        if orders.iter().any(|a| !(*a > 1.0) || !a.is_finite()) {
            return Err(Error::Domain("RDP orders must be finite and > 1".into()));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(
                "RDP orders must be strictly ascending".into(),
            ));
        }
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Domain("RDP values must be non-negative".into()));
        }
        Ok(Self { orders, values })
    }

    pub fn zeros(orders: Vec<f64>) -> Result<Self> {
        let values = vec![0.0; orders.len()];
        Self::new(orders, values)
    }

    /// One step of the subsampled Gaussian mechanism at every order.
    pub fn subsampled_gaussian(
        orders: Vec<f64>,
        sample_rate: f64,
        noise_multiplier: f64,
    ) -> Result<Self> {
        let values = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(a, sample_rate, noise_multiplier))
            .collect::<Result<Vec<_>>>()?;
        Self::new(orders, values)
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pointwise sum of two curves over the same orders.
    pub fn add(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::Domain(
                "cannot add RDP curves over different orders".into(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(RdpCurve {
            orders: self.orders.clone(),
            values,
        })
    }
}

/// RDP of the Gaussian mechanism with sensitivity 1: `α / (2σ²)`.
pub fn rdp_gaussian(order: f64, noise_multiplier: f64) -> Result<f64> {
    if !(order > 1.0) {
        return Err(Error::Domain(format!("RDP order must be > 1, got {order}")));
    }
    if !(noise_multiplier > 0.0) {
        return Err(Error::Domain(format!(
            "noise multiplier must be > 0, got {noise_multiplier}"
        )));
    }
    Ok(order / (2.0 * noise_multiplier * noise_multiplier))
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(e^c − 1)` for `c > 0`.
fn ln_expm1(c: f64) -> f64 {
    if c > 50.0 {
        c + (-(-c).exp()).ln_1p()
    } else {
        c.exp_m1().ln()
    }
}

/// RDP at integer order `α` of the Gaussian mechanism under Poisson
/// subsampling with rate `q`:
///
/// `ε(α) = ln(Σ_k C(α,k) (1−q)^{α−k} q^k exp((k²−k)/(2σ²))) / (α−1)`.
///
/// The binomial weights sum to one and the `k ∈ {0, 1}` exponentials are 1,
/// so the sum is rewritten as `1 + Σ_{k≥2} C(α,k)(1−q)^{α−k} q^k (e^{c_k}−1)`
/// and evaluated with a log-sum-exp followed by `ln(1 + e^x)`. This keeps full
/// relative precision for tiny `q` and never overflows for large `α`.
pub fn rdp_subsampled_gaussian(order: f64, sample_rate: f64, noise_multiplier: f64) -> Result<f64> {
    if !(order >= 2.0) || order.fract() != 0.0 || !order.is_finite() {
        return Err(Error::Domain(format!(
            "subsampled Gaussian RDP needs an integer order >= 2, got {order}"
        )));
    }
    if !(0.0..=1.0).contains(&sample_rate) {
        return Err(Error::Domain(format!(
            "sample rate must lie in [0, 1], got {sample_rate}"
        )));
    }
    if !(noise_multiplier > 0.0) {
        return Err(Error::Domain(format!(
            "noise multiplier must be > 0, got {noise_multiplier}"
        )));
    }
    if sample_rate == 0.0 {
        return Ok(0.0);
    }
    if sample_rate == 1.0 {
        return rdp_gaussian(order, noise_multiplier);
    }

    let alpha = order as u64;
    let two_var = 2.0 * noise_multiplier * noise_multiplier;
    let ln_q = sample_rate.ln();
    let ln_1mq = (-sample_rate).ln_1p();

    let mut log_terms = Vec::with_capacity(alpha as usize - 1);
    let mut ln_binom = (alpha as f64).ln(); // ln C(α, 1)
    for k in 2..=alpha {
        ln_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        let c = (k * k - k) as f64 / two_var;
        log_terms.push(ln_binom + (alpha - k) as f64 * ln_1mq + k as f64 * ln_q + ln_expm1(c));
    }
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok((softplus(lse) / (order - 1.0)).max(0.0))
}

/// Additive composition over `num_steps` identical steps.
pub fn compose(curve: &RdpCurve, num_steps: u64) -> RdpCurve {
    let t = num_steps as f64;
    RdpCurve {
        orders: curve.orders.clone(),
        values: curve.values.iter().map(|v| v * t).collect(),
    }
}

/// Classic RDP → (ε, δ) conversion: `min_α ε(α) + ln(1/δ)/(α−1)`.
/// Returns `(ε, best_order)`; ties resolve to the smallest order.
pub fn to_epsilon_delta(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&a, &v) in curve.orders.iter().zip(&curve.values) {
        let eps = v + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok((best.0.max(0.0), best.1))
}

/// ε after `num_steps` of DP-SGD with the given noise and sampling rate.
pub fn epsilon_after(
    noise_multiplier: f64,
    sample_rate: f64,
    num_steps: u64,
    delta: f64,
    orders: &[f64],
) -> Result<(f64, f64)> {
    let step = RdpCurve::subsampled_gaussian(orders.to_vec(), sample_rate, noise_multiplier)?;
    to_epsilon_delta(&compose(&step, num_steps), delta)
}

pub const CALIBRATION_SIGMA_MIN: f64 = 0.3;
pub const CALIBRATION_SIGMA_MAX: f64 = 256.0;
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;

/// Smallest noise multiplier (bisection on `[0.3, 256]`, tolerance `1e-3`)
/// whose accounted ε does not exceed `target.epsilon` at `target.delta`.
pub fn calibrate_noise(target: PrivacyBudget, sample_rate: f64, num_steps: u64) -> Result<f64> {
    calibrate_noise_with_orders(target, sample_rate, num_steps, &default_orders())
}

pub fn calibrate_noise_with_orders(
    target: PrivacyBudget,
    sample_rate: f64,
    num_steps: u64,
    orders: &[f64],
) -> Result<f64> {
    if !(target.epsilon.is_finite() && target.epsilon > 0.0) {
        return Err(Error::Domain(format!(
            "calibration needs a finite positive epsilon, got {}",
            target.epsilon
        )));
    }
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::Domain(format!(
            "sample rate must lie in (0, 1], got {sample_rate}"
        )));
    }
    if num_steps == 0 {
        return Err(Error::Domain("calibration needs at least one step".into()));
    }
    let eps = |sigma: f64| {
        epsilon_after(sigma, sample_rate, num_steps, target.delta, orders).map(|r| r.0)
    };

    let mut hi = CALIBRATION_SIGMA_MAX;
    if eps(hi)? > target.epsilon {
        return Err(Error::Unsatisfiable(format!(
            "epsilon {} at delta {} is out of reach even with noise multiplier {hi} (q = {sample_rate}, steps = {num_steps})",
            target.epsilon, target.delta
        )));
    }
    let mut lo = CALIBRATION_SIGMA_MIN;
    if eps(lo)? <= target.epsilon {
        return Ok(lo);
    }
    while hi - lo > CALIBRATION_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
