//! Video-conditioned raw waveform generation with a three-tier sample-level
//! recurrent generator.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`numerics`]), 8-bit linear audio codes and WAV I/O ([`audio_io`]),
//! feature/manifest ingestion and a synthetic corpus ([`dataset`]), the
//! generator and its three visual conditioning modes ([`generator`]),
//! truncated-BPTT training ([`training`]), likelihood-based retrieval
//! ([`evaluation`]) and crowd-vote dataset curation ([`curation`]).

pub mod audio_io;
pub mod curation;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod numerics;
pub mod training;

pub use error::{Error, ErrorClass, Result};
