//! Self-contained volumetric deep-learning engine.
//!
//! Provides dense row-major tensors, a dynamic reverse-mode autodiff tape,
//! the 3D CNN / recurrent layers needed for time-distributed volumetric
//! classifiers, NIfTI-1 ingestion, a procedural phantom data generator, and
//! a deterministic training loop with Adam.
//!
//! Everything is seeded and schedule-independent: two runs with the same
//! seeds produce bitwise-identical weights, metrics and checkpoints.

pub mod autodiff;
pub mod data;
pub mod layers;
pub mod models;
pub mod recurrent;
pub mod tensor;
pub mod training;
pub mod util;

pub use tensor::{Precision, Scalar, Shape, Tensor, TensorError};
