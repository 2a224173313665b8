//! Q-learning with non-Markovian observations.
//!
//! An agent observes a controlled hidden-Markov process only through its
//! emissions and keeps a finite, recursively updated agent state. Running
//! tabular Q-learning on that state converges to the fixed point of a
//! *synthetic* Bellman operator built from the stationary law of the joint
//! chain `(hidden state, agent state, action)`. This crate simulates the
//! system, computes every limit object exactly from the finite joint chain,
//! and splits each Q-learning increment into its drift, non-Markovian and
//! martingale parts so that the pieces can be checked against each other.

pub mod agent;
pub mod decomp;
pub mod embed;
pub mod env;
pub mod error;
pub mod oracle;
pub mod presets;
pub mod qlearn;
mod shape;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/limits.md")]
    struct Limits;
    #[doc = include_str!("../../../book/src/decomposition.md")]
    struct Decomposition;
    #[doc = include_str!("../../../book/src/embedding.md")]
    struct Embedding;
}
