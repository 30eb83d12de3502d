use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters that fully determine the DP-SGD mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub num_steps: u64,
    pub expected_lot_size: f64,
}

impl DpSgdConfig {
    pub fn new(
        clip_norm: f64,
        noise_multiplier: f64,
        sample_rate: f64,
        num_steps: u64,
        expected_lot_size: f64,
    ) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(Error::Domain(format!(
                "clip norm must be > 0, got {clip_norm}"
            )));
        }
        if !(noise_multiplier >= 0.0) || !noise_multiplier.is_finite() {
            return Err(Error::Domain(format!(
                "noise multiplier must be finite and >= 0, got {noise_multiplier}"
            )));
        }
        if !(0.0..=1.0).contains(&sample_rate) {
            return Err(Error::Domain(format!(
                "sample rate must lie in [0, 1], got {sample_rate}"
            )));
        }
        if num_steps == 0 {
            return Err(Error::Domain("num_steps must be positive".into()));
        }
        if !(expected_lot_size > 0.0) {
            return Err(Error::Domain("expected lot size must be positive".into()));
        }
        Ok(Self {
            clip_norm,
            noise_multiplier,
            sample_rate,
            num_steps,
            expected_lot_size,
        })
    }

    /// Sampling rate `q = L / N` (capped at 1) and `epochs · ⌈N / L⌉` steps.
    pub fn for_dataset(
        dataset_size: usize,
        expected_lot_size: f64,
        epochs: u64,
        clip_norm: f64,
        noise_multiplier: f64,
    ) -> Result<Self> {
        if dataset_size == 0 {
            return Err(Error::Domain("cannot train on an empty dataset".into()));
        }
        let n = dataset_size as f64;
        let lot = expected_lot_size.min(n);
        let steps = epochs * (n / lot).ceil() as u64;
        Self::new(clip_norm, noise_multiplier, lot / n, steps, lot)
    }
}

/// Poisson-sampled set of example indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lot {
    pub indices: Vec<usize>,
    pub expected_size: f64,
}

impl Lot {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Includes every index in `0..dataset_size` independently with probability
/// `sample_rate`.
pub fn poisson_lot<R: Rng + ?Sized>(
    dataset_size: usize,
    sample_rate: f64,
    rng: &mut R,
) -> Result<Lot> {
    if !(0.0..=1.0).contains(&sample_rate) {
        return Err(Error::Domain(format!(
            "sample rate must lie in [0, 1], got {sample_rate}"
        )));
    }
    let indices = (0..dataset_size)
        .filter(|_| rng.random::<f64>() < sample_rate)
        .collect();
    Ok(Lot {
        indices,
        expected_size: sample_rate * dataset_size as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGradient {
    values: Vec<f64>,
    l2_norm: f64,
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl PerExampleGradient {
    pub fn new(values: Vec<f64>) -> Self {
        let l2_norm = l2(&values);
        Self { values, l2_norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Scales `g` by `min(1, C / ‖g‖₂)`.
pub fn clip_gradient(g: &PerExampleGradient, clip_norm: f64) -> PerExampleGradient {
    if g.l2_norm <= clip_norm {
        return g.clone();
    }
    let mut factor = clip_norm / g.l2_norm;
    loop {
        let values: Vec<f64> = g.values.iter().map(|v| v * factor).collect();
        let norm = l2(&values);
        if norm <= clip_norm {
            return PerExampleGradient {
                values,
                l2_norm: norm,
            };
        }
        // rounding left the norm a few ulps above C
        factor *= 1.0 - f64::EPSILON;
    }
}

/// Relative slack allowed when re-checking clipped norms.
pub const CLIP_TOLERANCE: f64 = 1e-9;

/// `(Σ clipped + N(0, σ²C²·I)) / L` with `L` the expected lot size. Noise is
/// only drawn for coordinates where `trainable` is true (all, when `None`).
pub fn privatize_lot<R: Rng + ?Sized>(
    clipped: &[PerExampleGradient],
    dim: usize,
    config: &DpSgdConfig,
    trainable: Option<&[bool]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    for (i, g) in clipped.iter().enumerate() {
        if g.values.len() != dim {
            return Err(Error::Contract(format!(
                "gradient {i} has {} entries, expected {dim}",
                g.values.len()
            )));
        }
        let norm = l2(&g.values);
        if norm > config.clip_norm * (1.0 + CLIP_TOLERANCE) {
            return Err(Error::Contract(format!(
                "gradient {i} has norm {norm} above the clipping bound {}",
                config.clip_norm
            )));
        }
        for (s, v) in sum.iter_mut().zip(&g.values) {
            *s += v;
        }
    }
    if config.noise_multiplier > 0.0 {
        let std = config.noise_multiplier * config.clip_norm;
        for (i, s) in sum.iter_mut().enumerate() {
            if trainable.is_none_or(|m| m[i]) {
                let z: f64 = StandardNormal.sample(rng);
                *s += std * z;
            }
        }
    }
    let lot = config.expected_lot_size;
    for s in &mut sum {
        *s /= lot;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(sigma: f64, clip: f64, lot: f64) -> DpSgdConfig {
        DpSgdConfig::new(clip, sigma, 0.5, 1, lot).unwrap()
    }

    #[test]
    fn config_from_dataset_resolves_steps() {
        let c = DpSgdConfig::for_dataset(2000, 64.0, 3, 1.0, 1.0).unwrap();
        assert_eq!(c.num_steps, 3 * 32);
        assert!((c.sample_rate - 0.032).abs() < 1e-15);
        let c = DpSgdConfig::for_dataset(10, 64.0, 2, 1.0, 1.0).unwrap();
        assert_eq!((c.sample_rate, c.num_steps), (1.0, 2));
    }

    #[test]
    fn poisson_lot_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert!(poisson_lot(100, 0.0, &mut rng).unwrap().is_empty());
            assert_eq!(
                poisson_lot(100, 1.0, &mut rng).unwrap().indices,
                (0..100).collect::<Vec<_>>()
            );
        }
        assert!(poisson_lot(10, 1.5, &mut rng).is_err());
        let a = poisson_lot(500, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = poisson_lot(500, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poisson_lot_size_concentrates() {
        let (n, q, draws) = (1000usize, 0.05, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let total: usize = (0..draws)
            .map(|_| poisson_lot(n, q, &mut rng).unwrap().len())
            .sum();
        let mean = total as f64 / draws as f64;
        let se = (n as f64 * q * (1.0 - q) / draws as f64).sqrt();
        assert!(
            (mean - 50.0).abs() <= 3.0 * se,
            "mean {mean}, 3se {}",
            3.0 * se
        );
    }

    #[test]
    fn clip_examples() {
        let g = PerExampleGradient::new(vec![6.0, 8.0]);
        let c = clip_gradient(&g, 1.0);
        assert!((c.values()[0] - 0.6).abs() < 1e-15 && (c.values()[1] - 0.8).abs() < 1e-15);
        assert!(c.l2_norm() <= 1.0);
        let small = PerExampleGradient::new(vec![0.3, 0.4]);
        assert_eq!(clip_gradient(&small, 1.0), small);
        let zero = PerExampleGradient::new(vec![0.0; 4]);
        assert_eq!(clip_gradient(&zero, 1.0).values(), &[0.0; 4]);
    }

    #[test]
    fn privatize_without_noise_is_the_clipped_mean() {
        let gs = vec![
            PerExampleGradient::new(vec![0.2, -0.4]),
            PerExampleGradient::new(vec![0.6, 0.0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = privatize_lot(&gs, 2, &cfg(0.0, 1.0, 2.0), None, &mut rng).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15 && (out[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn privatize_rejects_unclipped_input() {
        let gs = vec![PerExampleGradient::new(vec![3.0, 4.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            privatize_lot(&gs, 2, &cfg(1.0, 1.0, 1.0), None, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn empty_lot_is_pure_noise_scaled_by_expected_size() {
        // Normal(0, σ²C²)/L with σ=1, C=1, L=10 → variance 1/100
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 20_000;
        let mut sq = 0.0;
        for _ in 0..draws {
            let v = privatize_lot(&[], 1, &cfg(1.0, 1.0, 10.0), None, &mut rng).unwrap()[0];
            sq += v * v;
        }
        let var = sq / draws as f64;
        assert!((var - 0.01).abs() < 0.05 * 0.01, "{var}");
    }

    #[test]
    fn noise_moments_match_the_mechanism() {
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zero = vec![PerExampleGradient::new(vec![0.0])];
        let samples: Vec<f64> = (0..draws)
            .map(|_| privatize_lot(&zero, 1, &cfg(1.0, 1.0, 1.0), None, &mut rng).unwrap()[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws as f64;
        assert!(mean.abs() < 3.0 / (draws as f64).sqrt(), "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn frozen_coordinates_get_no_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = privatize_lot(
            &[],
            3,
            &cfg(2.0, 1.0, 1.0),
            Some(&[true, false, true]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out[1], 0.0);
        assert_ne!(out[0], 0.0);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, 1..32)
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(v in vec_strategy(), c in 0.01f64..10.0) {
            let out = clip_gradient(&PerExampleGradient::new(v), c);
            prop_assert!(l2(out.values()) <= c);
            prop_assert!((out.l2_norm() - l2(out.values())).abs() <= 1e-12 * c.max(1.0));
        }

        #[test]
        fn clipping_is_idempotent(v in vec_strategy(), c in 0.01f64..10.0) {
            let once = clip_gradient(&PerExampleGradient::new(v), c);
            let twice = clip_gradient(&once, c);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn clipping_ignores_scale_above_the_bound(v in vec_strategy(), c in 0.01f64..1.0, lambda in 1.0f64..50.0) {
            let g = PerExampleGradient::new(v.clone());
            prop_assume!(g.l2_norm() >= c);
            let scaled = PerExampleGradient::new(v.iter().map(|x| x * lambda).collect());
            let a = clip_gradient(&g, c);
            let b = clip_gradient(&scaled, c);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * c);
            }
        }

        #[test]
        fn direction_is_preserved(v in vec_strategy(), c in 0.01f64..10.0) {
            let g = PerExampleGradient::new(v);
            prop_assume!(g.l2_norm() > 0.0);
            let out = clip_gradient(&g, c);
            let cos = g.values().iter().zip(out.values()).map(|(a, b)| a * b).sum::<f64>()
                / (g.l2_norm() * out.l2_norm());
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }
}
