//! Hierarchical joint source-channel coding of images over AWGN channels.

pub mod channel;
pub mod config;
pub mod error;
pub mod hvae;
pub mod jscc;
pub mod model;
pub mod pipeline;
pub mod rate_match;
pub mod source;

pub use error::{HjsccError, Result};
pub mod harness;
