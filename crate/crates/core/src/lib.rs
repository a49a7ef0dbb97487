//! Per-neuron threshold-and-gain gating (TauGate) on a frozen MLP backbone,
//! the usual parameter-efficient baselines, and the MNIST 0°/45° mode
//! specialization experiment built on them.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod ndcore;
pub mod report;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
