//! Federated beam-selection simulator.
//!
//! Maps uplink sub-6 GHz channel estimates to the best mmWave downlink beam
//! from a quantized codebook, trained with federated learning over a
//! synthetic multi-base-station street scene. Provides:
//!
//! - [`channel`]: beam codebook, dual-band geometric channel synthesis,
//!   capacity evaluation and optimal-beam labeling
//! - [`nn`]: a small CNN classifier with hand-rolled reverse-mode gradients
//! - [`fed`]: the federated round loop with FedAvg and FedLion server steps
//! - [`cluster`]: IFCA clustered training with epsilon-greedy assignment
//! - [`personalize`]: local baselines, fine-tuning and a two-expert
//!   mixture-of-experts with a trained gate
//! - [`data`]: strongest-station association, splits, subsampling, dataset I/O
//! - [`harness`]: experiment sweeps, metrics and CSV reporting

pub mod channel;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod nn;
pub mod personalize;
pub mod rng;

pub use error::{Error, Result};
