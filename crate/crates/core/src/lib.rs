//! Content-style feature augmentation for single-domain generalization in
//! segmentation: streaming class statistics, gradient-guided feature
//! perturbation, confidence-weighted augmented losses, a small differentiable
//! segmentation network and a synthetic multi-domain benchmark.

pub mod afu;
pub mod dfa;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Tape, Tensor, Var};
