//! Fine-tuning based knowledge editing on a from-scratch toy transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`]: dense tensors, a reverse-mode tape
//!   and a mask-aware Adam optimizer.
//! - [`model`]: the decoder-only transformer, its parameter registry, tuning
//!   locations, greedy decoding and the binary checkpoint format.
//! - [`data`]: synthetic fact worlds, counterfactual edit sets and probes.
//! - [`pretrain`]: trains the base model until it knows its world.
//! - [`editor`]: depth-first, breadth-first and streaming editing pipelines.
//! - [`eval`]: reliability, generalization, capability and efficiency.
//! - [`locations`]: location sweeps, selection and depth-transfer heuristics.

pub mod autodiff;
pub mod data;
pub mod editor;
pub mod error;
pub mod eval;
pub mod fpenv;
pub mod gradcheck;
pub mod locations;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, ParamLocation, Selector, TokenId, TransformerLM};
pub use tensor::Tensor;
