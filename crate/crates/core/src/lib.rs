//! Communication-light volt/VAR control for radial distribution feeders.
//!
//! The crate models a feeder through a linearized power flow, trains a
//! two-tier neural policy (one utility-side network broadcasting a condensed
//! signal, one small head per inverter) by stochastic primal-dual iteration,
//! and benchmarks the result against an unrestricted optimal policy, a
//! per-scenario OPF, and no control.
//!
//! Everything is deterministic under fixed seeds: scenario generation,
//! training, and evaluation reproduce byte-identical outputs, with or without
//! the `parallel` feature.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod feeder;
pub mod parallel;
pub mod policy;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
