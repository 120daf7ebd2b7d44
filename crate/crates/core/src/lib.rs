//! Decision-focused learning for restless multi-armed bandits.
//!
//! A predictor maps arm features to transition kernels; Whittle indices are
//! computed from the kernels and differentiated through the selected Bellman
//! system; a soft top-k relaxation of the index policy makes the policy
//! differentiable; and an importance-sampling estimate of the policy's value
//! on logged trajectories is maximized end to end.

pub mod belief;
pub mod bench;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod predictor;
pub mod rng;
pub mod soft_topk;
pub mod training;
pub mod whittle;
pub mod whittle_diff;

pub use error::{Error, Result};
