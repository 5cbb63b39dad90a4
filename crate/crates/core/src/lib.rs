//! A self-contained laboratory for training attention-based
//! sequence-to-sequence models under interchangeable training regimes:
//! teacher forcing, free running, scheduled sampling (token and sequence
//! level), professor forcing, and attention forcing.
//!
//! Everything runs on a minimal reverse-mode autodiff tape over dense
//! `f64` tensors ([`tape::Tape`]), small enough to finite-difference
//! check end to end. Synthetic tasks with known gold alignments stand in
//! for TTS and NMT corpora, and a two-stage cascade
//! ([`cascade`]) mirrors the frame-level/waveform-level split of a
//! speech synthesis pipeline at desk scale.

pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod regimes;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
