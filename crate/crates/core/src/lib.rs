//! Spatial-temporal deformable attention (STDA) and a small multi-frame
//! lesion detector built on it.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors, linear layers, normalization and the
//!   central-difference gradient checker.
//! * [`stda`]: the attention kernel with its analytic backward pass.
//! * [`transformer`]: conv stem, ST-Encoder, ST-Decoder and prediction heads.
//! * [`detection`]: Hungarian matching, set loss and COCO-style AP.
//! * [`synthdata`]: deterministic ultrasound-like clip generator and dataset I/O.
//! * [`inference`]: full and encoder-feature-shuffle inference plus the benchmark.
//! * [`training`]: run configuration, optimizers, the two-phase schedule and
//!   the verification suites driven by the CLI.

pub mod detection;
pub mod error;
pub mod inference;
pub mod numerics;
pub mod oracle;
pub mod stda;
pub mod synthdata;
pub mod training;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
