//! Factored time-delay layers and the stack built from them.

mod counts;
mod orthogonal;
pub(crate) mod splice;
mod stack;

pub use counts::{param_count, GpVariant, ParamCounts, UncertaintyMode};
pub use orthogonal::{
    apply_semi_orthogonal_constraint, semi_orthogonal_residual, SEMI_ORTHOGONAL_MAX_ITERATIONS,
    SEMI_ORTHOGONAL_TOLERANCE,
};
pub use splice::{splice, SpliceSpec};
pub use stack::*;
