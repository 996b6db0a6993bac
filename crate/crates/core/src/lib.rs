//! Model merging by task-vector sparsification.
//!
//! A task vector is the elementwise difference between a fine-tuned model and
//! its base. This crate builds task vectors from safetensors checkpoints,
//! sparsifies them (magnitude, random, n:m balanced, TIES trimming, and
//! conflict-aware sequential pruning), and merges them back into the base:
//!
//! ```text
//! W_final = W_base + Σ λ_i · (mask_i ⊙ τ_i)
//! ```
//!
//! It also provides the diagnostics used to study merging interference
//! (overlap rate, balance grids, orthogonality checks) and a two-step λ grid
//! search driven by an external evaluator.

pub mod analysis;
pub mod bitmask;
pub mod checkpoint;
pub mod cli;
pub mod conflict;
pub mod engine;
pub mod error;
pub mod halfp;
pub mod pruning;
pub mod recipe;
pub mod rng;
pub mod search;
pub mod taskvec;
pub mod tensor;

pub use bitmask::BitMask;
pub use checkpoint::{write_checkpoint, Body, Checkpoint, Dtype, TensorData, TensorMeta};
pub use error::{Error, Result};
pub use recipe::{MergeRecipe, Method};
pub use taskvec::{ScalingCoefficients, SparsityMask, TaskVector};
pub use tensor::Tensor;
