//! Unsupervised linear embedding learning.
//!
//! The pipeline has three stages:
//!
//! 1. [`graph_cluster`] assigns pseudo-labels by authority ascent on a
//!    weighted k-NN graph.
//! 2. [`triplets`] samples (anchor, positive, negative) constraints from those
//!    labels.
//! 3. [`trainer`] learns an orthonormal projection `L ∈ ℝ^{d×l}` together
//!    with per-triplet confidence weights by minimising the reweighted
//!    probabilistic angular loss of [`loss`] with Riemannian optimisation on
//!    a product of a Grassmann and a Euclidean manifold ([`manifold`]).
//!
//! [`eval`] provides the clustering (NMI, pairwise F/P/R) and retrieval
//! (Recall@K) metrics; [`dataset`] the file formats.

// Parameter checks use `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph_cluster;
pub mod loss;
pub mod manifold;
pub mod rng;
pub mod trainer;
pub mod triplets;

pub use dataset::{FeatureMatrix, LabelVector, MatrixFormat};
pub use error::{Error, ErrorKind, Result};
pub use eval::EvalResult;
pub use graph_cluster::{ClusterAssignment, ClusterConfig, GraphModel};
pub use loss::{LossConfig, Variant};
pub use manifold::{CgOptions, ProductPoint, ProductTangent};
pub use trainer::{FitResult, TrainConfig, TrainMode, TrainReport};
pub use triplets::{Triplet, TripletBatch, TripletSet};
