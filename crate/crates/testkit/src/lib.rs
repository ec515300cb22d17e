//! Test-only oracles for the varnet workspace.
//!
//! Everything in this crate is deliberately independent of `varnet-core`:
//! it operates on plain slices and line lists, so the numbers it produces
//! cannot be contaminated by the code under test. It is meant to be used
//! as a dev-dependency only.

pub mod distflow;
pub mod grid;
pub mod trees;
