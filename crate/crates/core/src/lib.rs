//! Bi-layer one-shot head avatars.
//!
//! A frame is synthesized as the sum of a pose-dependent coarse layer and a
//! pose-independent texture warped into the output frame. The texture is
//! generated once per avatar from a single source frame and can be refined by
//! a learned gradient-descent updater; per-frame driving only runs the small
//! inference generator on a keypoint vector.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod infer;
pub mod lgd;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
