//! Kinetic master-equation laboratory.
//!
//! Stochastic processes on `N`-velocity spheres (Brownian motion and the
//! Balescu-Prigogine pair diffusion), their exact spectra and variational
//! gap estimates, and the closed-form kinetic limits used to check them.

pub mod error;
pub mod geometry;
pub mod kinetic_limits;
pub mod master_sim;
pub mod observables;
pub mod quad;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use error::{KinError, Result};
pub use geometry::{ConservationMode, ManifoldSpec, VelocityState};
pub use master_sim::{InitialCondition, KernelSpec, Process, SimConfig};
pub use observables::{Observable, ObservableSeries};
