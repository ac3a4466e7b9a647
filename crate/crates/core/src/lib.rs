//! Structural-health-monitoring workbench for a delaminated composite cantilever.
//!
//! Pipeline: [`fem`] builds and damages the beam and solves its modes, [`sim`]
//! integrates the modal equations to produce sensor records, [`sysid`] fits
//! tapped-delay-line predictors and pulls modal poles out of linear ones,
//! [`classify`] turns frequency shifts into a damage report, and [`harness`]
//! ties it together for the `shm` command line.

pub mod classify;
pub mod cli;
pub mod config;
pub mod error;
pub mod fem;
pub mod harness;
pub mod network;
pub mod persist;
pub mod seeds;
pub mod sim;
pub mod sysid;

pub use error::{Result, ShmError};
