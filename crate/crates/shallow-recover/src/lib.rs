//! Recovery of one-hidden-layer sigmoid network weights from binary labels
//! via cross-entropy minimization: analytic gradients and Hessians, the
//! geometric quantities controlling local strong convexity, gradient-descent
//! recovery, moment-method initialization, and a seeded experiment harness.

pub mod datagen;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod model;
pub mod optimizer;
pub mod quadrature;
pub mod rng;
pub mod sum;
pub mod tensorinit;

pub use error::{RecoverError, Result};
