//! Simulation and verification laboratory for Hermite-type processes with
//! time-varying regularity.
//!
//! The crate is organized in layers:
//! - [`quad`]: singularity-aware one-dimensional meshes and compensated sums;
//! - [`kernels`]: integrated kernels, covariance/increment quadrature, and
//!   dyadic decomposition norms (the deterministic ground truth);
//! - [`rng`]: counter-based deterministic random streams;
//! - [`types`]: shared parameter/result types and file formats;
//! - [`fit`]: small least-squares helpers for slope estimates.
//!
//! Everything is deterministic for a fixed seed: reduction orders are fixed
//! and independent of thread count.

pub mod error;
pub mod fit;
pub mod kernels;
pub mod quad;
pub mod rng;
pub mod types;

pub use error::{LabError, LabResult, Warning};
