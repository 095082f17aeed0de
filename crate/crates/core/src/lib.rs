//! Checkpoint arithmetic, a toy transformer, response-pattern labeling,
//! baseline merges and layer-wise coefficient calibration for merging a
//! long-reasoning model with a short-reasoning one.
//!
//! Everything here is `no_std` + `alloc`; file formats and the CLI live in
//! the `rpam` crate.

#![no_std]

extern crate alloc;

pub mod checkpoint;
pub mod eval;
pub mod labeling;
pub mod matrix;
pub mod merge;
pub mod model;
pub mod rng;
pub mod rpam;
pub mod tensor;

pub use checkpoint::{lerp_checkpoint, Checkpoint, CheckpointError};
pub use labeling::{ModelTag, PLDataset, PatternLabel};
pub use model::{ModelConfig, TokenId, ToyModel};
pub use rpam::{rpam_merge, CalibrationConfig, CoefPair, MergeCoefficients};
pub use tensor::{lerp_tensor, matmul, Shape, Tensor, TensorError};
