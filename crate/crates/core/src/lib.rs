//! Pseudo-spectral simulator and verification lab for a regularized
//! stochastic compressible Navier-Stokes system with density-dependent
//! viscosity on the periodic torus.

pub mod error;
pub mod functionals;
pub mod io;
pub mod limits;
pub mod montecarlo;
pub mod noise;
pub mod scalar;
pub mod scheme;
pub mod spectral;
pub mod state;
pub mod tolerances;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid = spectral::TorusGrid<f64>;
pub type Field = spectral::SpectralField<f64>;
pub type State = state::FluidState<f64>;
pub type Params = state::RegularizationParams<f64>;
