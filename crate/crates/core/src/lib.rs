//! Simulation of adaptive phase estimation with vacuum-seeded SU(1,1)
//! interferometers.
//!
//! * [`tmsq`]: twin-Fock decomposition of the OPA and outgoing amplitudes.
//! * [`measurement`]: photon-counting and optimal-measurement likelihoods.
//! * [`posterior`]: log-domain grid posterior with peak analysis.
//! * [`protocol`]: fixed, ladder and optimal-adaptive feedback loops.
//! * [`analysis`]: precision benchmarks, Fisher information, error propagation.
//! * [`ensemble`]: seeded Monte Carlo campaigns and threshold scans.
//! * [`export`]: CSV and JSON artifacts with provenance.
//! * [`verify`]: the self-check battery behind `su11 verify`.

pub mod analysis;
pub mod ensemble;
pub mod error;
pub mod export;
pub mod measurement;
pub mod posterior;
pub mod protocol;
pub mod tmsq;
pub mod verify;

pub use error::{Error, Result};
