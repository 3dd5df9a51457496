//! Anchor-based single-shot face detection: anchor geometry, anchor matching,
//! the detection loss, a toy network, decoding and evaluation.

pub mod assign;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod toynet;

pub use error::{Error, Result};
