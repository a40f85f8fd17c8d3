//! Analysis and geometry on marked configuration spaces over `R^d`.
//!
//! The library samples marked Poisson and mixed Poisson measures, acts on
//! them with the semidirect product of compactly supported diffeomorphisms
//! and smooth currents, and provides the differential calculus needed to
//! verify the closed-form identities of that setting numerically: gradients
//! and divergences of cylinder functions, integration by parts, Dirichlet
//! forms and operators, the Charlier chaos decomposition, second
//! quantization, and the heat semigroup of the solvable Gaussian/lognormal
//! base model.

pub mod base_space;
pub mod calculus;
pub mod chaos;
pub mod configuration;
pub mod error;
pub mod geometry;
pub mod group;
pub mod levy;
pub mod montecarlo;
pub mod quadrature;
pub mod semigroup;
pub mod smooth;

pub use error::{Error, Result};
pub use geometry::{BoxRegion, MarkedPoint, SpatialVec, SquareMat, MAX_DIM};
