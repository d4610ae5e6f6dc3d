//! A self-contained laboratory for training and auditing uncertainty-aware
//! classifiers under domain shift.
//!
//! The crate combines a compact reverse-mode autodiff engine ([`grad`]), a
//! small layer/optimizer zoo ([`nn`]), the FALCON training losses
//! ([`losses`]) and FGSM sample generation ([`adversary`]), calibration
//! metrics ([`metrics`]), graded image perturbations ([`shift`]), dataset
//! and checkpoint I/O ([`data`]), experiment orchestration ([`harness`]),
//! and report rendering ([`report`]).

pub mod adversary;
pub mod data;
pub mod error;
pub mod grad;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod shift;

pub use error::{Error, Result};
