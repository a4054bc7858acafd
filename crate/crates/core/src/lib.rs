//! MAP point estimation over undirected transfer hierarchies.
//!
//! Leaf classes carry Gaussian or multinomial likelihoods; divergence
//! penalties tie each class to its parent, weighted by per-parameter
//! degree-of-transfer coefficients estimated by bootstrap resampling or
//! jointly under an inverse-Gamma hyperprior.

pub mod baselines;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod gradcheck;
pub mod hierarchy;
pub mod io;
pub mod likelihoods;
pub mod objective;
pub mod optimize;
pub mod pca;
pub mod synth;

pub use error::{Error, Result};
