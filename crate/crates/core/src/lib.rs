//! Simulator and library for fault-tolerant decentralized inference over
//! vertically partitioned features.
//!
//! Devices each hold one spatial patch of every sample. Every device encodes
//! its patch; a set of aggregator devices concatenate whatever neighbor
//! representations reach them (missing ones become zeros), run a prediction
//! head, and then average their log-probabilities with neighboring
//! aggregators for a number of gossip rounds. Training simulates faults with
//! party-wise or communication-wise dropout.
//!
//! Module map:
//! - [`nn`]: dense MLP engine with exact gradients and Adam
//! - [`topology`]: base graphs, consensus matrices, spectral radius
//! - [`faults`]: device, communication and Markov link fault processes
//! - [`data`]: IDX loading, patch partitioning, splits, synthetic data
//! - [`inference`]: the encode / aggregate / head / gossip pipeline
//! - [`train`]: decentralized training with dropout and checkpoints
//! - [`metrics`]: selection policies, risk estimation, communication counts,
//!   ensemble decomposition
//! - [`certify`]: self-contained numerical certificates
//! - [`harness`]: experiment configs, run matrices and CSV output

pub mod certify;
pub mod data;
pub mod error;
pub mod faults;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
