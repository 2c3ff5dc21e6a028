//! Frozen-feature evaluation protocols.

pub mod hungarian;
pub mod kmeans;
pub mod overcluster;
pub mod pipeline;
pub mod probe;
pub mod retrieval;

pub use hungarian::hungarian;
pub use kmeans::{kmeans_fit, ClusterAssignment};
pub use overcluster::{greedy_precision_match, overcluster_miou, patch_labels_from_mask, ConfusionTally, OverclusterResult};
pub use probe::{linear_probe, ProbeConfig, ProbeMetrics};
pub use retrieval::{nn_retrieval_predict, MemoryBank, PatchRef};
pub use pipeline::{run_linear, run_nn, run_overcluster, EvalMetrics, FractionMetrics, PatchSet};
