//! Missed-thrust-robust low-thrust trajectory design in the Hill frame.

pub mod ad;
pub mod certificate;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod propagation;
pub mod recovery;
pub mod solver;
pub mod transcription;

pub use error::{Error, Result};
