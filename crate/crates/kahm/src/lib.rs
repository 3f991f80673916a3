//! Kernel affine hull machines for collaborative learning.
//!
//! This crate builds per-class geometric models from data alone (no gradient
//! descent, no tunable hyperparameters), aggregates independently trained
//! client models into a global classifier through a distance measure, and
//! evaluates the learning-theory quantities the construction admits:
//! Rademacher complexity, generalization and approximation-risk bounds, and
//! sample complexity.
//!
//! Start with the runnable programs under `examples/`:
//!
//! * `fit_and_map` — build a single machine and inspect its hull map.
//! * `federated_blobs` — per-client, per-class models aggregated by distance.
//! * `label_skew` — the non-iid label-skew federation protocol end to end.
//! * `bounds_report` — every computable bound for a given N, delta, epsilon.
//! * `decision_grid` — export a 2-D decision surface for plotting.
//! * `archive_roundtrip` — binary model persistence with checksums.
//!
//! The `kahm` binary exposes the same functionality as subcommands
//! (`fit`, `predict`, `fedsim`, `bounds`, `grid`, `validate`).

pub mod archive;
pub mod bounds;
pub mod cli;
pub mod error;
pub mod federation;
pub mod fedsim;
pub mod linalg;
pub mod machine;
pub mod partitioned;
pub mod tabular;

pub use error::{Error, Result};
pub use machine::{
    build_kahm, compute_encoder, fit_lambda, gaussian_kernel, hull_weights, kahm_distance,
    kahm_distance_batch, kahm_map, kahm_map_batch, kernel_matrix, norm_bound,
    select_subspace_dim, Encoder, KahmModel, KernelParams, SampleBlock,
};
pub use partitioned::{
    build_partitioned, build_partitioned_with_cap, cluster_split, partitioned_distance,
    partitioned_distance_batch, PartitionedKahm, DEFAULT_PART_CAP,
};
