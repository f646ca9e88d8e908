//! Sub-cycle field and intensity correlations of THz sources sampled by
//! two-probe electro-optic detection.
//!
//! The crate covers the whole chain: field sources (synthetic reference
//! fields and a stochastic multimode laser model), the electro-optic
//! detector with lock-in modulation, streaming correlation estimators with
//! detector-noise subtraction, spectra of correlation traces, photon-number
//! bookkeeping and an experiment runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod budget;
pub mod config;
pub mod correlator;
pub mod eos;
pub mod error;
pub mod mb;
pub mod model;
pub mod runner;
pub mod sources;
pub mod spectra;

pub use config::{parse_config, ExperimentConfig};
pub use correlator::{accumulate, correlation_scan, CorrelationTrace, Estimate, SufficientStats};
pub use eos::{DetectorParams, PulseSampleStream};
pub use error::{Error, Result};
pub use mb::{MBParams, ModalTrajectory, SimSettings};
pub use model::{FieldTrace, RandomStream};
pub use sources::SourceSpec;
