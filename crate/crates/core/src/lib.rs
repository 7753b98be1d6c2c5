//! Desk-scale audio-visual speech-token language modeling.

pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod synthgen;
pub mod tokens;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
