//! Meta-learned few-shot one-class classification.
//!
//! A Deep Sets network is trained across many fully labeled tasks to act as
//! a binary classifier conditioned on a support set of positive examples.
//! On a new task it classifies queries from the support set alone, in a
//! single forward pass. The crate also carries the episodic data pipeline,
//! a synthetic task generator, a Random Forest baseline with self-labeling,
//! and the evaluation metrics used to compare them.

pub mod data;
pub mod error;
pub mod forest;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
