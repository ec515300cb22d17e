//! Command-line pipeline around the core library: generate a bundled feeder
//! fixture with synthetic traces, train the two-tier policy, score it against
//! the baselines, and summarize runs.

pub mod commands;
pub mod config;
pub mod fixture;
pub mod gen;
pub mod manifest;
