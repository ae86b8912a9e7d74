//! Desk-scale masked diffusion language model inference.

pub mod bench;
pub mod decoder;
pub mod dip;
pub mod embed;
pub mod error;
pub mod kv_cache;
pub mod masking;
pub mod model;
pub mod policy;
pub mod pool;
pub mod ranking;
pub mod sequence;
pub mod timing;
pub mod tokenizer;
pub mod trace;

pub use error::{Error, Result};
