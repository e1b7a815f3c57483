//! Uncertainty mechanisms for a single layer: Gaussian weight posteriors, the
//! dropout mixture, activation-basis interpolation and latent hidden outputs.

mod block;
mod gaussian;
mod gp;
mod latent;
mod noise;

pub use block::{draw_gaussian, ParamBlock, Sample};
pub use gaussian::{
    bayes_dropout_hyperparam_grads, elbo_hyperparam_grads, kl_bayes_dropout, kl_gaussian,
    kl_proximal_step, reparam_mc_grads, sample_weights, sample_weights_bayes_dropout,
    standard_dropout_mask, BayesDropoutConfig, GaussianVariational, HyperGrads,
};
pub use gp::{gp_forward, gp_node, GpBasisSet};
pub use latent::{latent_kl_per_frame, vtdnn_forward, Affine, LatentNoise, LatentOutputLayer};
pub use noise::{DrawSite, NoiseKey, NoiseStream, Quantity, SHARED_SEQUENCE};

pub use crate::tdnn::posterior_mean_collapse;
