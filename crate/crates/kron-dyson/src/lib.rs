//! Matrix Dyson equation solver and stability analysis for Kronecker random
//! matrices, with Monte Carlo checks of the mesoscopic central limit theorem.

pub mod algebra;
pub mod cli;
pub mod clt;
pub mod ensemble;
pub mod error;
pub mod mde;
pub mod sampler;
pub mod stability;

pub use error::{Error, Result};
