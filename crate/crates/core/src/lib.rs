//! Continual visual anomaly detection over precomputed patch-feature maps.
//!
//! Memory-bank (PatchCore) and Gaussian (PaDiM) detectors, their continual
//! variants, and an evaluation harness that runs a task sequence and reports
//! per-checkpoint metrics and operation counts.

pub mod coreset;
pub mod error;
pub mod fmap;
pub mod harness;
pub mod ledger;
pub mod padim;
pub mod padim_cl;
pub mod patchcore;
pub mod patchcore_cl;
pub mod scenario;
pub mod synth;

pub use error::{Error, Result};
