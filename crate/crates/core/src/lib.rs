//! Granularity-adaptive advantage reweighting for group-relative policy optimization.
//!
//! Outcome rewards are normalized within a group of trajectories, then redistributed
//! over tokens: divergence between the sampling policy and a hint-conditioned teacher
//! opens segments, entropy growth closes them, and every token in a segment shares the
//! divergence weight of its onset. A toy tool-use environment and a small softmax
//! policy provide an end-to-end training loop.

pub mod engine;
pub mod env;
pub mod error;
pub mod io;
pub mod policy;
pub mod reweighting;
pub mod rng;
pub mod segmentation;
pub mod signals;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{CreditVector, GearConfig, Segment, TokenRecord, Trajectory, TrajectoryGroup, Variant};
