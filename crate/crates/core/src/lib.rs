//! Saturation-induced Jacobian attenuation for MLP vector fields `ḣ = f(h)`
//! and its consequences for Floquet multipliers of periodic orbits.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: small dense matrices, spectral norms, eigenvalues.
//! - [`activations`]: σ, σ′ and `Λ_σ = sup|σ′|`.
//! - [`network`]: the MLP field, its forward trace and factored Jacobian.
//! - [`bounds`]: `C(U)`, the refined `C̃(U)` and related certificates.
//! - [`flow`]: RK4 trajectories, transition matrices, Floquet checks.
//! - [`benchmark`]: the Stuart–Landau oscillator and its exact constants.
//! - [`training`]: least-squares fitting with Adam and the bias-shift protocol.
//! - [`experiments`]: sweep runners that write CSV/JSON artifacts.

pub mod activations;
pub mod benchmark;
pub mod bounds;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod network;
pub mod numerics;
pub mod training;

pub use activations::Activation;
pub use benchmark::StuartLandau;
pub use bounds::{RegionSamples, SaturationReport};
pub use error::{Error, Result};
pub use flow::{FloquetResult, VectorField};
pub use network::{Layer, Mlp};
pub use numerics::{Matrix, Spectrum};
