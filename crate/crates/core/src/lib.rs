//! Dissipative response theory toolkit: many-body chains, Lindblad evolution,
//! the oscillation-dissipation resonance protocol, finite-N Dicke spectra,
//! two-time Kadanoff-Baym dynamics and memory-kernel response predictions.

pub mod dicke;
pub mod drt;
pub mod error;
pub mod fock;
pub mod kbe;
pub mod linalg;
pub mod lindblad;
pub mod spectroscopy;

pub use error::{Error, Result};
