//! Spectrum-to-structure embedding alignment for odor prediction from
//! electron-ionization mass spectra.

pub mod acquisition;
pub mod alignment;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ms_data;
pub mod splits;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
