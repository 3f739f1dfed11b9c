//! Workloads for the imr runtime.
//!
//! One-step jobs ([`MapReduceApp`](imr_core::engine::MapReduceApp)):
//! word counting, candidate pair counting and in-edge weight sums.
//! Iterative jobs ([`IterativeApp`](imr_core::iterative::IterativeApp)):
//! PageRank, single-source shortest paths, k-means and GIM-V.

pub mod codec;
pub mod counting;
pub mod gimv;
pub mod inedge;
pub mod kmeans;
pub mod pagerank;
pub mod sssp;

pub use counting::{CountSum, PairCount, WordCount};
pub use gimv::{Gimv, GimvOps, MatVec};
pub use inedge::InEdgeSum;
pub use kmeans::KMeans;
pub use pagerank::PageRank;
pub use sssp::Sssp;
