//! Soft-input soft-output MIMO detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays with reverse-mode differentiation.
//! - [`channel`]: Rayleigh MIMO instances and their real-valued lift.
//! - [`tokenizer`]: constraint and symbol-prior tokens built from an instance.
//! - [`network`]: the graph-aware attention detector and its ablations.
//! - [`baselines`]: exhaustive ML, LMMSE and OAMP reference detectors.
//! - [`trainer`]: training loop, BER evaluation.
//! - [`complexity`]: multiply-accumulate accounting for the network.

pub mod baselines;
pub mod channel;
pub mod complexity;
pub mod error;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
