//! Command-line and HTTP front ends for the `diffcolor` pipeline.
//!
//! [`cli`] backs the `diffcolor` binary; [`service`] exposes the same
//! operations as an axum router with background jobs for training and
//! synchronous, training-free renders for editing.

pub mod backend;
pub mod cli;
pub mod runs;
pub mod service;
