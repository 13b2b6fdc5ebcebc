//! Minimal-action problems in random space-time potentials.
//!
//! An environment is a marked Poisson cloud of compactly supported bumps on
//! R x R^d; paths pay a convex kinetic cost plus the potential along the way.
//! This crate samples environments, solves the discrete point-to-point and
//! loop problems by dynamic programming, estimates the long-time shape
//! function and its gradient, and audits the structural inequalities the
//! discretization is supposed to satisfy.

pub mod asymptotics;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod environment;
pub mod kinetics;
pub mod report;
mod rng;
pub mod solver;

/// Version stamp embedded in every serialized artifact.
pub const FORMAT_VERSION: u32 = 1;
