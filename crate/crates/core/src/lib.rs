//! Attention-free sequence modelling for visit-structured event data.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine on an append-only tape,
//!   with a finite-difference harness that every operator is checked against.
//! * [`data`] — patient records, vocabulary, inter-visit gap bucketing, batch
//!   construction, a synthetic cohort generator, and file formats.
//! * [`model`] — the gated mixer model (additive and axial variants), its
//!   parameter store, losses, and checkpoints.
//! * [`train`] — rectified Adam, the cyclical schedule, the fit loop,
//!   pretrain/fine-tune transfer, and evaluation metrics.

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
