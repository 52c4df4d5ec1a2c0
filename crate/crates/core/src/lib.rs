//! Return-conditioned imitation learning with adaptive multimodal rewards.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod eval;
mod error;
pub mod expert;
pub mod features;
pub mod finetune;
mod jsonl;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod worldgrid;

pub use error::{Error, Result};
pub use jsonl::SCHEMA_VERSION;
