//! Desk-scale masked vision-language pretraining on a mixture-of-modality-experts
//! Transformer.

pub mod backbone;
pub mod codebook;
pub mod config;
pub mod error;
pub mod finetune;
pub mod input;
pub mod masking;
pub mod param;
pub mod pipeline;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
