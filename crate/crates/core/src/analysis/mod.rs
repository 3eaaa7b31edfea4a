//! Diagnostics built on the order-parameter flow: loss geometry at the
//! unspecialized point, per-head metrics, pruning and sweeps.

pub mod gradients;
pub mod heads;
pub mod sweep;

pub use gradients::{
    check_init_gradient, check_softmax1_fixed_point, estimate_hessian_coefficients, FixedPointReport, HessianReport,
    InitGradientReport,
};
pub use heads::{
    attention_maps, cluster_heads, head_cosine_matrix, prune_heads, AttentionMap, PruneReport, PruneStage,
};
pub use sweep::{sweep, SweepAxis, SweepConfig, SweepReport, SweepRow};
