//! Appearance and temporal alignment scoring between fixed-length frame
//! feature sequences, and prototype-based few-shot classification built on
//! those scores.
//!
//! - [`linalg`]: dense kernels (cosine, stable log-sum-exp and softmax).
//! - [`alignment`]: similarity matrix, appearance/temporal scores, baselines.
//! - [`losses`]: training objective, analytic gradients, prototype training.
//! - [`classifier`]: episode inference with inductive or transductive refinement.
//! - [`episodes`]: synthetic data, the feature container, episode sampling.
//! - [`harness`]: evaluation with confidence intervals, sweeps, and the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod checkpoint;
pub mod classifier;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;

pub use alignment::{AlignmentConfig, FeatureSequence};
pub use classifier::{Episode, InferenceConfig, Refinement};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use losses::{LossConfig, PrototypeBank};
