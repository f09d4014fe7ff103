//! Elastic-width arbitrary-scale super-resolution.
//!
//! One shared weight store runs at several widths: subnet `t` uses only the
//! first `⌊C_in·w_t⌋` mid channels of every block, so smaller scale factors
//! can be served by cheaper subnets. Each block gates its features with a
//! scale-conditioned channel attention whose scale inputs are interleaved at
//! fixed positions, keeping them aligned across widths.

pub mod backbone;
pub mod bench;
pub mod config;
pub mod error;
pub mod interweave;
pub mod numerics;
mod par;
pub mod run;
pub mod scale_space;
pub mod trainer;
pub mod upsampler;

pub use error::{Error, Result};
