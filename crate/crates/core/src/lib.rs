//! Cohort driving-behavior baselines from naturalistic telemetry.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`telemetry`] parses, cleans and selects per-second drive records;
//!    [`geo`] extracts stop-intersection approaches and their decelerations.
//! 2. [`baseline`] flags anomalous segments and participants by leave-one-out
//!    KS distance.
//! 3. [`baseline`] pools the survivors into senior and young baseline CDFs and
//!    compares them with the two-sample KS test from [`stats`].
//! 4. [`classify`] searches the percentile range that best separates the two
//!    baselines, then labels participants by which baseline they sit closer to.
//!
//! [`synthgen`] produces seeded synthetic cohorts so every stage can be
//! exercised without private data, and [`cli`] wires it all into the
//! `drivebaseline` binary.

pub mod baseline;
pub mod classify;
pub mod cli;
pub mod error;
pub mod geo;
pub mod stats;
pub mod synthgen;
pub mod telemetry;

pub use error::{Error, Result};
pub use stats::EmpiricalCdf;
pub use telemetry::{Cohort, DrivePoint};
