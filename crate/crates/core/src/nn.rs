//! Minimal reverse-mode autodiff, parameter management, and optimization.
//!
//! Everything above the signal-processing layer (encoders, alignment losses,
//! fusion heads) is expressed as graphs of [`ops`] recorded on a
//! [`tape::Tape`]. Double-precision throughout: gradient correctness is
//! verified against central finite differences, which demands f64 headroom.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use params::ParamSet;
pub use tape::{GradStore, Tape, Var};
