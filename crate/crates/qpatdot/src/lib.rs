//! Coupled diffuse-optical / photoacoustic inversion on 2D diffusion models.
//!
//! The crate generates synthetic boundary-current and internal-pressure data
//! from a 2D finite-element diffusion model and reconstructs the absorption
//! (`σ`), diffusion (`γ`), and photoacoustic efficiency (`Γ`) coefficients
//! with a three-stage algorithm — analytic boundary recovery of `γ`, a
//! coupled adjoint-gradient BFGS optimization of `(γ, σ)`, and an algebraic
//! averaged inversion for `Γ` — plus a single-stage least-squares baseline
//! for comparison.
//!
//! See the `book/` guide for the model equations, discretization choices,
//! objective functionals, and the reconstruction pipeline; `docs/config.md`
//! documents the experiment configuration schema consumed by the `qpatdot`
//! binary.

pub mod adjoint;
pub mod assembly;
pub mod config;
pub mod error;
pub mod fields;
pub mod forward;
pub mod linalg;
pub mod mesh;
pub mod objective;
pub mod optimize;
pub mod pipeline;

pub use error::{Error, Result};
