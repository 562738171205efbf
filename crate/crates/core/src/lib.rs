//! Sparse hierarchical attention over 2-D patch maps.
//!
//! A slide is a [`SparseMap`]: active grid coordinates with one feature row
//! each, plus optional context rows. Sparse convolutions ([`conv`]) and
//! windowed attention ([`attention`]) run from precomputed rulebooks, so work
//! scales with the number of active sites rather than the grid area. The
//! [`model`] module stacks them into an encoder with a bag-level (MIL) head
//! or a UNet decoder, trained with the tape in [`autodiff`].

pub mod attention;
pub mod autodiff;
pub mod benchmark;
pub mod conv;
pub mod error;
pub mod format;
pub mod layers;
pub mod model;
pub mod oracles;
pub mod scalar;
pub mod sparse;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Result, SpanError};
pub use model::{Ablation, HeadKind, ModelConfig, ModelParams, Prediction, Target};
pub use ndarray;
pub use scalar::{Precision, Scalar};
pub use sparse::{build_sparse_map, Coord, Rect, SparseMap};
pub use synth::{Sample, SyntheticTaskSpec, TaskKind};
pub use train::{Metrics, TrainConfig};
