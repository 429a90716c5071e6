//! Image classification with region pooling, spatial pyramid pooling and a
//! complete-graph GCN head, on top of a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod graph;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod region;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Mode, Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
