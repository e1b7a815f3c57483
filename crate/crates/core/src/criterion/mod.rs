//! Toy lattice-free MMI: reference and competitor graphs, log-space forward–backward,
//! the MMI and cross-entropy terms, and the combined objective.

mod forward_backward;
mod graph;
mod mmi;

pub use forward_backward::{forward_backward, FbResult};
pub use graph::{
    build_denominator_graph, build_numerator_graph, build_weighted_numerator_graph, Arc, Bigram,
    SequenceGraph, BIGRAM_TOLERANCE,
};
pub use mmi::{ce_loss_and_grad, combine, mmi_loss_and_grad, CriterionConfig, ElboBreakdown};
