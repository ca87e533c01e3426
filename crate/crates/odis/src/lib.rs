#![allow(clippy::type_complexity, clippy::too_many_arguments, clippy::needless_range_loop)]

//! Object-level self-distillation (ODIS) for vision transformers, desk scale.
//!
//! The crate trains a micro ViT with a teacher-student pair where the
//! pooling token attends only to patches covered by a target object's
//! segmentation mask, and evaluates the frozen features with k-NN, linear
//! probing, and dense nearest-neighbor retrieval.
//!
//! Start with the runnable programs in `examples/`, or the `odis` binary
//! for dataset generation, training, and evaluation.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod rng;
pub mod tensor;
pub mod vit;
pub mod workers;

pub use error::{OdisError, Result};
pub use tensor::{Scalar, Tensor};
