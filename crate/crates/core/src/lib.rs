//! Bayesian rigid point-set registration.
//!
//! The correspondence between an observed point set `Y` and a reference `X`
//! is marginalised out, leaving a posterior over the rigid transformation
//! alone. That posterior is explored with Hamiltonian Monte Carlo or MALA;
//! the lowest-energy sample gives the MAP registration.
//!
//! Modules:
//! - [`geometry`]: rigid transforms in 2D and 3D.
//! - [`model`]: likelihood, energy, gradient and point estimators.
//! - [`samplers`]: leapfrog, HMC, MALA and chain execution.
//! - [`synthdata`]: lattice references and noisy partial observations.
//! - [`analysis`]: registration errors, ensemble statistics, diagnostics.
//! - [`registration`]: the sample-then-estimate pipeline.
//! - [`cli`]: file-driven experiments behind the `psreg` binary.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numfmt;
pub mod registration;
pub mod samplers;
pub mod synthdata;

pub use error::{Error, Result};
pub use geometry::{PointSet, TransformParams};
pub use model::{ModelSpec, RegistrationTarget};
pub use registration::{register, Registration, RegistrationConfig};
pub use samplers::{Chain, Potential, SamplerConfig, SamplerKind};
