//! Joint multi-graph matching and sparse 3D geometry learning from 2D keypoint
//! collections.
//!
//! The pipeline matches each instance's 2D keypoints against a learnable set of
//! per-category 3D "universe" points. Because every instance is matched to the
//! same universe, composed pairwise matchings are cycle-consistent by
//! construction. The crate is organised as:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation over small dense
//!   matrices, including a differentiable right pseudo-inverse.
//! - [`geometry`]: projection model, weak-perspective reconstruction residual,
//!   synthetic camera sampling, keypoint normalization.
//! - [`graphgen`]: Delaunay-based 2D/3D graph construction and the assignment
//!   product graph.
//! - [`network`]: point encoder, per-category operator, deformation module and
//!   the graph matching network.
//! - [`matching`]: score-to-permutation extraction, pairwise composition,
//!   cycle-consistency verification and metrics.
//! - [`training`]: loss terms, schedule, optimizer and the training loop.
//! - [`dataio`]: dataset manifests, synthetic data generation, checkpoints and
//!   exports.

pub mod autodiff;
pub mod dataio;
pub mod geometry;
pub mod graphgen;
pub mod matching;
pub mod network;
pub mod training;

pub use autodiff::{gradient_check, AutodiffError, ParamId, ParamStore, Parameter, Tape, Tensor};
pub use dataio::{DataError, DatasetManifest, KeypointInstance, SyntheticConfig};
pub use geometry::{Camera, GeometryError, ProjectedPoints, UniversePoints};
pub use graphgen::{AssignmentGraph, Graph2D, GraphError, UniverseGraph3D};
pub use matching::{MatchError, MultiMatching, PairwiseMatching, PartialPermutation};
pub use network::{NetworkConfig, UniverseModel};
pub use training::{LossWeights, Schedule, TrainError, TrainState};
