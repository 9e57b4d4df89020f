//! Stochastic development regression.
//!
//! Manifold-valued responses are modelled as noisy endpoints of Euclidean
//! drift + covariate + noise processes, developed onto the manifold through
//! the frame bundle. Parameters are fitted by maximizing a Laplace
//! approximation of the marginal likelihood over the latent driving paths.

pub mod development;
pub mod error;
pub mod experiments;
pub mod frame;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod optim;
pub mod process;

pub use error::{Error, Result};
