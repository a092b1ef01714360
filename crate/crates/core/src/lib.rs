//! Desk-scale laboratory for TDD massive-MIMO hybrid precoding.
//!
//! The pipeline mirrors a two-phase uplink-pilot protocol: sparse mmWave
//! channels are sensed through trainable unit-modulus analog combiners, a
//! per-user neural network maps received pilots straight to analog precoder
//! columns, a short second pilot phase estimates the low-dimensional
//! equivalent channel, and classical ZF/WMMSE digital precoding closes the
//! loop. Classical compressed-sensing baselines and a Monte-Carlo evaluation
//! harness sit alongside.

pub mod baselines;
pub mod channel;
pub mod cli;
pub mod config;
pub mod digital;
pub mod dnn;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod pilots;
pub mod rng;
pub mod tensor_file;

pub use config::{load_config, SystemConfig};
pub use error::{Error, Result};
