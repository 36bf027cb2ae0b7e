//! CrossPT-style multi-task prompt tuning on a frozen toy transformer.
//!
//! Target-task prompts are convex combinations of shared source prompts and
//! task-specific private prompts, mixed by a learned attention table with an
//! adaptive softmax temperature. The crate bundles the tensor/autodiff core,
//! the frozen backbone, prompt training for both stages, analysis metrics,
//! synthetic task families, and a CLI experiment harness.

pub mod backbone;
pub mod composer;
pub mod error;
pub mod param;
pub mod prompt;
pub mod rng;
pub mod taskgen;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
