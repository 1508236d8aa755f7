//! Attention-transfer training and analysis engine for Vision Transformers.
//!
//! The crate trains a student ViT from scratch while copying or distilling
//! only the attention maps of a frozen teacher, and ships the measurement
//! toolkit that goes with it: CKA representation similarity, JSD head
//! matching, prediction ensembling, activation accounting, and attention
//! overlay export.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod vit;

pub use error::{AtxfError, Result};
pub use tensor::ops as tensor_ops;
pub use tensor::Tensor;
