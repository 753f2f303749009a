//! Dilated recurrent neural-network quantum states.
//!
//! * [`rnn`]: GRU cells, dilated wiring, output heads, manual reverse pass.
//! * [`wavefunction`]: autoregressive sampling and amplitude evaluation.
//! * [`hamiltonians`]: local energies and exact diagonalization.
//! * [`vmc`]: energy/gradient estimators, Adam, training loop, checkpoints.
//! * [`observables`]: connected correlations and power-law fits.
//! * [`theory`]: linearized vanilla/dilated correlation analysis.

pub mod error;
pub mod hamiltonians;
pub mod numerics;
pub mod observables;
pub mod rnn;
pub mod theory;
pub mod vmc;
pub mod wavefunction;

pub use error::{Error, Result};
