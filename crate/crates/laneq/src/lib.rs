//! A small laboratory for cooperative highway lane changing.
//!
//! Connected automated vehicles (CAVs) pick lane-change actions from a shared
//! graph-fused Q-network; human-driven vehicles (HDVs) follow a rule-based
//! lane policy. The crate provides everything needed to train and evaluate
//! that controller end to end:
//!
//! * [`sim`]: deterministic three-lane highway micro-simulation with two
//!   exit ramps, IDM car following and instantaneous lane changes,
//! * [`obs`]: per-step graph observations (features, adjacency, CAV mask),
//! * [`reward`]: intention-aware shared reward with collision and
//!   lane-change penalties,
//! * [`nn`]: dense linear algebra, exact reverse-mode gradients, Adam,
//! * [`model`]: the graph Q-network itself (encoder, graph convolution,
//!   mask filter, Q head) plus action selection,
//! * [`replay`] and [`trainer`]: experience replay and the DQN training loop,
//! * [`config`], [`baseline`], [`eval`], [`io`], [`cli`]: run configuration,
//!   reference policies, the density-sweep evaluation harness, artifact
//!   serialization and the command-line front end.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod num;
pub mod obs;
pub mod replay;
pub mod reward;
pub mod sim;
pub mod trainer;

pub use error::Error;

/// Working precision of the shipped toolchain.
///
/// The numeric core is generic over [`num::Scalar`]; the simulator, trainer
/// and all serialized artifacts are pinned to double precision through this
/// alias.
pub type Real = f64;

/// Dense row-major matrix at the crate's working precision.
pub type Mat = nn::Matrix<Real>;

pub type Result<T> = std::result::Result<T, Error>;
