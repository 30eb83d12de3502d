//! Differentially private synthetic text generation at desk scale.
//!
//! The crate covers the full path from a labeled corpus to a utility report:
//! Rényi-DP accounting and author auditing ([`privacy`]), DP-SGD
//! ([`dpsgd`]), two prompt-conditioned generators ([`model`]), corpus
//! handling ([`data`]), synthetic-corpus evaluation ([`eval`]) and the
//! experiment runner ([`experiment`]).

pub mod autograd;
pub mod data;
pub mod dpsgd;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod params;
pub mod privacy;
pub mod seed;

pub use error::{Error, Result};
