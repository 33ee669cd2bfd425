//! CRISP: a correlation-resilient subspace-collision index for approximate
//! nearest neighbor search over high-dimensional float vectors.
//!
//! The pipeline has three phases:
//!
//! 1. **Adaptive preprocessing** ([`preprocess`]): a spectral check decides
//!    per dataset whether a randomized orthogonal rotation is worth its
//!    O(N*D^2) cost, and applies it in place when it is.
//! 2. **CSR indexing** ([`index`]): M subspaces, each an inverted
//!    multi-index over K x K centroid cells, laid out as contiguous
//!    offsets + id arrays for sequential streaming.
//! 3. **Dual-mode querying** ([`search`]): collision counting over the
//!    activated cells, followed by exhaustive exact verification
//!    (guaranteed mode) or Hamming re-ranking with incremental distance
//!    pruning and patience termination (optimized mode).
//!
//! [`theory`] computes the guaranteed-mode recall lower bound and the exact
//! and simulated binomial tails used to validate it; [`dataset`] hosts the
//! fvecs/ivecs formats, the brute-force oracle and the recall metric.

pub mod dataset;
pub mod error;
pub mod index;
pub mod kmeans;
pub mod persist;
pub mod preprocess;
mod rng;
pub mod search;
pub mod synth;
pub mod theory;

pub use dataset::{
    brute_force_knn, exact_knn, l2_sq, load_fvecs, load_ivecs, recall_at_k, save_fvecs,
    save_ivecs, DatasetMatrix, GroundTruth, Neighbor,
};
pub use error::{CrispError, Result};
pub use index::{
    assign_cell, binarize, build_index, hamming, BuildParams, CrispIndex, CsrPostingIndex,
    SubspaceCodebooks,
};
pub use kmeans::{kmeans, KMeansResult};
pub use persist::{load_index, save_index};
pub use preprocess::{
    compute_cev, generate_rotation, maybe_rotate, rotate_query, sample_rows, RotationRecord,
};
pub use search::{
    search, search_with_stats, Mode, QueryStats, ScoreScratch, SearchConfig,
};
pub use theory::{
    estimate_p_star, exact_binomial_failure, hoeffding_recall_bound,
    simulate_collision_retrieval, BoundInput,
};
