//! Learned iterative CT reconstruction posed as a neural ODE, together
//! with the operators and classical baselines it is built from.
//!
//! The pipeline: [`projector`] supplies a Joseph ray-driven forward
//! projector `A` and its exact adjoint; [`analytic`] gives FBP/FDK
//! initial volumes; [`ode`] integrates
//! `dx/dt = −λ(γ Aᵀ(Ax − p) + μ N_θ(x))` with RK4 and differentiates it
//! with the adjoint method; [`training`] fits `(θ, γ)` with Adam.

pub mod analytic;
pub mod classical;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ode;
pub mod par;
pub mod phantoms;
pub mod projector;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{ConeGeometry, FanGeometry, Geometry};
pub use projector::{back_project, forward_project, Sinogram};
pub use volume::{Volume, VolumeGrid};
