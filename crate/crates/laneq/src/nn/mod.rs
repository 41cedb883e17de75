//! Minimal neural-network core: dense row-major matrices, the two layer
//! kinds the Q-network needs, a masked loss, Adam, and a finite-difference
//! gradient checker. No external math dependencies; every gradient is
//! written out by hand and verified against central differences.

mod adam;
mod gradcheck;
mod layers;
mod loss;
mod matrix;

pub use adam::{adam_step, soft_update, AdamState};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use layers::{Activation, DenseCache, DenseLayer, GraphConvCache, GraphConvLayer};
pub use loss::masked_mse;
pub use matrix::Matrix;
