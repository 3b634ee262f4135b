//! Domain discovery and functional grouping of experts.

mod kmeans;
mod spearman;
mod ward;

pub use kmeans::{kmeans, kmeans_restarts, DomainLabeling, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
pub use spearman::{fractional_ranks, similarity_matrix, spearman_rho, SimilarityMatrix};
pub use ward::{partition_ess, ward_partition, ExpertPartition, Merge};
