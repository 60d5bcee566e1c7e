//! A desk-scale laboratory for depth-breadth feature fusion.
//!
//! The crate reimplements, at toy size and in plain `f64`, the pipeline of a
//! multimodal language model whose vision side produces one *depth* feature
//! (a plain patch embedding) and several *breadth* features (the same image
//! encoded under different task prompts). The pieces:
//!
//! * [`tensor`] - reverse-mode autodiff over flat `f64` tensors, plus PCA and
//!   the DBFT on-disk tensor container.
//! * [`nn`] - shared layers (linear, layer norm, attention blocks) and the
//!   named-parameter registry used for checkpoints and optimizers.
//! * [`vision`] - the prompt-conditioned vision encoder.
//! * [`fusion`] - token / pooling / channel integration of a feature bundle,
//!   and the MLP projector into the language model.
//! * [`lm`] - a byte-level decoder-only language model with a bidirectional
//!   vision prefix.
//! * [`model`] - the assembled encoder + projector + LM, with checkpointing.
//! * [`training`] - Adam, cosine schedule, and the two training stages.
//! * [`align`] - the vision-text alignment probe (trainable projection P,
//!   contrastive-style diagnostic loss, config ablations).
//! * [`viz`] - PCA-based patch visualizations rendered to PPM.
//! * [`data`] - deterministic synthetic scenes (shapes + bitmap glyphs) with
//!   captions, OCR strings, region strings, and instruction pairs.

pub mod align;
pub mod data;
pub mod error;
pub mod fusion;
pub mod lm;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod vision;
pub mod viz;

pub use error::{CoreError, Result};
pub use nn::{ParamBuilder, ParamStore, Parameter};
pub use tensor::Tensor;
