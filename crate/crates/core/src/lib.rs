//! Classical-quantum hybrid dynamics.
//!
//! A classical phase-space point `z` and a quantum state `ρ` (or `ψ`) evolve
//! jointly under coupled Itô SDEs whose ensemble average is a completely
//! positive, linear master equation for the hybrid state `ϱ(z, t)`. The crate
//! provides model construction and positivity validation, Euler–Maruyama
//! steppers for the trajectory equations, a finite-volume solver for the
//! master equation used as an independent oracle, and diagnostics for purity,
//! conditioning, linearity, purification and the continuous-measurement
//! picture.
//!
//! Dense linear algebra in [`numlin`] is generic over the nalgebra scalar.
//! Everything that carries physics runs in `f64` through the aliases below.

pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod integrator;
pub mod measurement;
pub mod model;
pub mod noise;
pub mod numlin;
pub mod operator;
pub mod purify;
pub mod zoo;

pub use error::{CqError, Result};
pub use integrator::{
    simulate, simulate_standard, CqStateDensity, CqStatePure, Mode, QuantumState, SimConfig,
    Termination, Trajectory,
};
pub use model::{
    build_hamiltonian_model, build_standard_semiclassical, validate, Coefficients, CqModel,
    HamiltonianSpec, StandardScModel, ValidationReport,
};
pub use operator::Operator;

pub use nalgebra;
pub use num_complex;

/// Real scalar used throughout the physics modules.
pub type Real = f64;
/// Complex scalar.
pub type Complex = num_complex::Complex64;
/// Dense complex matrix (operators, density matrices, `D0`, `D1`).
pub type CMatrix = nalgebra::DMatrix<Complex>;
/// Dense real matrix (`σ`, `D2`).
pub type RMatrix = nalgebra::DMatrix<Real>;
/// Point in classical phase space.
pub type PhaseVector = nalgebra::DVector<Real>;
/// Unit-norm state vector.
pub type StateVector = nalgebra::DVector<Complex>;
/// Unit-trace Hermitian positive semi-definite matrix.
pub type DensityMatrix = CMatrix;

/// Crate version, embedded in every exported artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
