//! Clustering of expression rows by ordered mean structures.
//!
//! Rows are modelled as a finite mixture over a catalog of ordered structures
//! (ordered partitions of the experimental groups). Each component density
//! integrates the block means under an ordered gamma prior; the ordering
//! factor is an exact gamma-rank probability computed by a negative-binomial
//! dynamic program. Mixing weights are fit by EM and rows are assigned to the
//! structure they most probably follow.
//!
//! The numerical core is generic over [`Real`] (`f32`/`f64`); the aliases
//! below fix the scalar to `f64`.

pub mod cluster;
pub mod em;
pub mod error;
pub mod io;
pub mod model;
pub mod rankprob;
pub mod rng;
pub mod scalar;
pub mod simulator;
pub mod structures;

pub use error::{Error, Result};
pub use scalar::Real;

pub type GammaRankProblem = rankprob::GammaRankProblem<f64>;
pub type SharedParams = model::SharedParams<f64>;
pub type BlockStats = model::BlockStats<f64>;
pub type LogDensityMatrix = em::LogDensityMatrix<f64>;
pub type MixtureFit = em::MixtureFit<f64>;

pub use cluster::{ClusterAssignment, ClusterSummary};
pub use model::ObservationModel;
pub use structures::{ExperimentLayout, OrderedStructure, SampleBlocks, UnorderedPartition};
