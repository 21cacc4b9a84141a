//! Desk-scale zero-shot learning engine.
//!
//! The pipeline: multi-level feature fusion feeds a per-attribute spatial
//! attention over image regions; an attribute-guided channel gate
//! disentangles the resulting semantic features; a train-only transformer
//! encoder lets semantic features interact across a batch; classification
//! happens on the hypersphere against class attribute vectors, with a
//! parallel global branch and a calibrated two-branch ensemble at test time.
//!
//! Everything runs on the CPU in f64 with a hand-rolled reverse-mode tape,
//! so a full train/eval cycle on the bundled synthetic datasets takes
//! minutes and is bit-reproducible given a seed.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inspect;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
