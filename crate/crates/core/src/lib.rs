//! Factored TDNN acoustic models with Bayesian, dropout-mixture, activation-basis and
//! latent-variable layers, trained by one-sample variational inference against a
//! toy lattice-free MMI criterion.

pub mod bayes;
pub mod criterion;
pub mod data;
pub mod decode;
pub mod error;
pub mod grad;
pub mod tdnn;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
