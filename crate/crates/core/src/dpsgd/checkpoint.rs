use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::privacy::RdpCurve;

use super::engine::TrainState;

/// On-disk training snapshot. `model_config` carries whatever the model
/// needs to rebuild itself (architecture, noise schedule, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_kind: String,
    pub step: u64,
    pub rng_seed: u64,
    pub noise_multiplier: Option<f64>,
    pub accountant_curve: Option<RdpCurve>,
    pub model_config: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_state(
        model_kind: impl Into<String>,
        state: &TrainState,
        noise_multiplier: Option<f64>,
        model_config: serde_json::Value,
    ) -> Self {
        Self {
            model_kind: model_kind.into(),
            step: state.step,
            rng_seed: state.rng_seed,
            noise_multiplier,
            accountant_curve: state.accountant_curve.clone(),
            model_config,
            params: state.params.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn train_state(&self) -> TrainState {
        TrainState {
            params: self.params.clone(),
            step: self.step,
            accountant_curve: self.accountant_curve.clone(),
            rng_seed: self.rng_seed,
        }
    }
}
