//! Dense arrays and a small reverse-mode tape covering the primitives the
//! acoustic models use.

mod matrix;
mod tape;

pub use matrix::{log_add, logsumexp, DenseMatrix};
pub use tape::{
    activation_forward, affine_forward, sigmoid, Activation, GradTape, Gradients, Var,
};
pub(crate) use tape::{gaussian_kl_terms, gp_mix_value};
