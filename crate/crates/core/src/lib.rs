//! Structured-sparsity pruning of dense networks.
//!
//! A three-layer prior (Markov random field support, Gamma precisions,
//! Gaussian weights) is fitted by alternating a mean-field variational
//! estimator ([`vbi`]) with sum-product message passing on the support grid
//! ([`mrf`]), orchestrated by [`turbo`]. Pruned weight matrices can be
//! stored in the clustered block format of [`sparse`].

pub mod data;
pub mod error;
pub mod mrf;
pub mod nn;
pub mod prior;
pub mod sparse;
pub mod turbo;
pub mod vbi;

pub use error::{Error, Result};
