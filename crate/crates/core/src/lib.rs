//! Pairs trading with Kalman-filter hedge tracking.
//!
//! A spread between two assets is tracked either by a model-based Kalman
//! filter or by a filter whose gain comes from a small recurrent network.
//! The filtered innovation drives a Bollinger-style open/close policy, and
//! the learned gain can be trained first for tracking and then directly for
//! trading profit through a smoothed version of that policy.
//!
//! The numerical core is generic over the scalar type (see [`scalar::Real`])
//! so the same code runs on plain `f64` and on the autodiff tape. The aliases
//! below fix the scalar to `f64` for ordinary use.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gainnet;
pub mod indicator;
pub mod kalman;
pub mod ledger;
pub mod linalg;
pub mod policy;
pub mod scalar;
pub mod ssmodel;
pub mod training;

pub use error::{Error, Result};

pub type Matrix = linalg::Matrix<f64>;
pub type FilterState = kalman::FilterState<f64>;
pub type NoiseParams = kalman::NoiseParams<f64>;
pub type KnetState = gainnet::KnetState<f64>;
