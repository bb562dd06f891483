//! Plasma-sheath fading channel simulator and a blind receiver that learns
//! the fading curves of a constellation with a symmetric manifold network
//! (SMN) trained by expectation maximisation.
//!
//! Pipeline: [`physics`] turns an electron-density trajectory into complex
//! channel gains, [`link`] builds pilot-bearing frames and passes them
//! through the channel with AWGN, [`net`] and [`em`] fit the SMN and demodulate,
//! [`baselines`] provides reference receivers and [`bench`] drives the
//! experiments.

pub mod baselines;
pub mod bench;
pub mod em;
pub mod error;
pub mod link;
pub mod net;
pub mod physics;
pub mod rng;

pub use error::{Error, Result};
