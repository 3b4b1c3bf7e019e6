//! Unsupervised deformable 3D image registration with a co-attention
//! network, a built-in reverse-mode autodiff core, and a synthetic cardiac
//! phantom benchmark.
//!
//! The crate is self-contained: tensors, tape, network, losses, metrics,
//! volume I/O, and the training loop all live here, CPU-only and
//! deterministic for a fixed seed within one build.

pub mod coattention;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod regnet;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volio;

pub use error::{Error, Result};
