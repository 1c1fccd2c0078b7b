//! Unified text-to-text pre-training for customer-service dialogue tasks.

pub mod corpus;
pub mod decode_eval;
pub mod denoising;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod model;
pub mod promptkit;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
