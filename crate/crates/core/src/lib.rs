//! Task translation: fuse features from frozen task-specific models into
//! predictions for a primary task.
//!
//! Pipeline: each frozen [`task_models::TaskModel`] is slid over the primary
//! clip ([`align`]), its per-frame features are projected into a shared
//! latent space, tagged with learned task positional embeddings, fused by a
//! transformer encoder and decoded for the primary task ([`translator`]).

pub mod align;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod task_models;
pub mod tensor;
pub mod train;
pub mod translator;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
