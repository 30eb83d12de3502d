use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An (ε, δ) guarantee. `ε = +∞` is the non-private mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::Domain(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::Domain(format!(
                "delta must lie in [0, 1), got {delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }

    pub const fn non_private() -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta: 0.0,
        }
    }

    pub fn is_private(&self) -> bool {
        self.epsilon.is_finite()
    }
}

/// `δ = 1 / (10 · n)`.
pub fn default_delta(num_training_samples: usize) -> Result<f64> {
    if num_training_samples == 0 {
        return Err(Error::Domain(
            "default delta needs at least one training sample".into(),
        ));
    }
    Ok(1.0 / (10.0 * num_training_samples as f64))
}

/// Serializes infinite ε as the string `"inf"` since JSON has no infinity.
pub mod epsilon_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => parse_epsilon(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses `"inf"`, `"infinity"`, `"∞"` or a decimal number.
pub fn parse_epsilon(text: &str) -> Result<f64> {
    let t = text.trim().to_ascii_lowercase();
    match t.as_str() {
        "inf" | "infinity" | "+inf" | "∞" => Ok(f64::INFINITY),
        _ => t
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("cannot parse epsilon {text:?}"))),
    }
}
