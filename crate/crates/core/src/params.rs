//! Named parameter collections shared by every trainable model.
//!
//! Gradients travel as one flat vector laid out in parameter order, which is
//! what DP-SGD clips and noises.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// False for weights shared across the lot in a way per-example
    /// gradient machinery cannot attribute (positional embeddings).
    pub per_example: bool,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        value: Array2<f64>,
        per_example: bool,
    ) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            per_example,
            frozen: false,
        });
        self.params.len() - 1
    }

    /// Gaussian init with the given standard deviation.
    pub fn push_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        per_example: bool,
        rng: &mut R,
    ) -> usize {
        let value = Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.push(name, value, per_example)
    }

    pub fn push_constant(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fill: f64,
        per_example: bool,
    ) -> usize {
        self.push(name, Array2::from_elem(shape, fill), per_example)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.params[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.params[idx].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Start offset of each parameter inside the flat layout.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.params
            .iter()
            .map(|p| {
                let off = acc;
                acc += p.value.len();
                off
            })
            .collect()
    }

    /// Freezes every parameter that cannot produce per-example gradients.
    pub fn freeze_shared(&mut self) {
        for p in &mut self.params {
            if !p.per_example {
                p.frozen = true;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))?;
        self.params[idx].frozen = frozen;
        Ok(())
    }

    /// Flat mask of coordinates that are updated by the optimizer.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            mask.extend(std::iter::repeat_n(!p.frozen, p.value.len()));
        }
        mask
    }

    /// Names of trainable parameters that lack per-example gradients.
    pub fn unfrozen_shared(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.per_example && !p.frozen)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend(p.value.iter().copied());
        }
        out
    }

    /// `params -= lr * update` on trainable coordinates.
    pub fn apply_update(&mut self, update: &[f64], learning_rate: f64) {
        debug_assert_eq!(update.len(), self.num_scalars());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            if !p.frozen {
                for (w, u) in p.value.iter_mut().zip(&update[off..off + n]) {
                    *w -= learning_rate * u;
                }
            }
            off += n;
        }
    }

    /// Writes a flat vector back into the parameters (all coordinates).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Contract(format!(
                "flat vector has {} entries, parameters have {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            for (w, v) in p.value.iter_mut().zip(&flat[off..off + n]) {
                *w = *v;
            }
            off += n;
        }
        Ok(())
    }
}
