//! Two-level contrastive alignment of EEG and EXG biosignals.
//!
//! EEG foundation models are useless when the hardware at hand only records
//! peripheral signals (EOG/ECG/EMG). This crate trains an EXG encoder whose
//! patch and sequence representations line up with a (frozen or stand-in)
//! EEG encoder's, so that downstream heads built for EEG features keep
//! working when EEG channels are missing.
//!
//! The pipeline, end to end:
//!
//! 1. [`sigcore`] — z-score + 45 Hz low-pass preprocessing and time-window
//!    patching shared by both modalities.
//! 2. [`augment`] — 2× up/down resampling that manufactures extra positive
//!    views of each EXG sequence.
//! 3. [`encoder`] — the dual-domain EXG encoder (temporal CNN ∥ spectral CNN
//!    → Transformer) and the EEG-encoder interface with a trainable stand-in.
//! 4. [`align`] — patch-level and sequence-level InfoNCE alignment losses and
//!    the training loop that optimizes them jointly.
//! 5. [`downstream`] — attention fusion of aligned patch tokens and a small
//!    classifier probe, with subject-aware dataset splitting.
//! 6. [`synthdata`], [`dataio`] — a paired-signal generator with a known
//!    planted structure, and on-disk dataset/checkpoint formats.

pub mod align;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sigcore;
pub mod spectral;
pub mod synthdata;

pub use error::{Error, Result};
