//! Indistinguishable token vocabularies (adaptive randomized response), a secret permutation
//! tokenizer, closed-form reconstruction-risk bounds, attacker games, evaluation metrics and a
//! split-inference wire protocol with toy analytic models.

#![allow(clippy::needless_range_loop)]

pub mod adversary;
pub mod arr;
pub mod bounds;
pub mod error;
pub mod ltok;
pub mod metrics;
pub mod protocol;
pub mod repro;
pub mod vocab;
mod wire;

pub use error::{Error, Result};
