//! Sample-wise data-driven stochastic optimal control.
//!
//! Building blocks for closed-loop control of stochastic systems with
//! unknown model parameters: forward SDE simulation, an online direct
//! particle filter for the parameters, a sample-wise stochastic-gradient
//! solver for the adjoint-based control update, baseline filters and a
//! mesh-based solver for comparison, benchmark problems with analytic
//! references, and an experiment harness with CSV output.

pub mod baseline_filters;
pub mod benchmarks;
pub mod direct_filter;
pub mod error;
pub mod fullgrid;
pub mod harness;
pub mod samplewise;
pub mod sde;

pub use error::{Error, Result};
