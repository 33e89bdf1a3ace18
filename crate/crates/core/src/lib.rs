//! Masked cross-modal contrastive pre-training for synchronized audio-visual
//! sequences, with CTC fine-tuning, decoding, and evaluation — small enough to
//! test exhaustively on a single machine.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod diffcore;
pub mod downstream;
pub mod encoders;
pub mod fusion;
pub mod masking;
pub mod model;
pub mod objective;
pub mod error;
pub mod par;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
