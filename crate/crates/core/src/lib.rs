//! Ground states of the defocusing rotating nonlinear Schrödinger equation
//!
//! ```text
//!   -½Δφ + Vφ + β|φ|^{p-1}φ - Ω L_z φ + ωφ = 0
//! ```
//!
//! computed on periodic boxes with a Fourier pseudospectral discretization.
//! Two notions of ground state are supported: the *action* ground state, an
//! unconstrained minimizer of `S = E + ω‖φ‖²`, and the *energy* ground state,
//! a minimizer of `E` at fixed mass. The [`analysis`] module builds the
//! parameter sweeps and consistency experiments on top of the solvers.

pub mod analysis;
pub mod error;
pub mod fieldfile;
pub mod grid;
pub mod physics;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{Axis, Field, Grid};
pub use physics::{Diagnostics, ModelParams, PotentialSpec};
pub use solver::{GroundStateResult, InitSpec, Method, SolverConfig, Stabilization};

pub use num_complex::Complex64;
