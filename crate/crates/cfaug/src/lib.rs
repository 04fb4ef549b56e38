//! Counterfactual and factual background augmentation lab.
//!
//! The crate generates synthetic spurious-correlation datasets, augments
//! them by infilling causal regions (counterfactual) or backgrounds
//! (factual), trains a small from-scratch convolutional classifier with a
//! combined objective, and measures robustness under background shifts.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exp;
pub mod img;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;

pub use error::{CfaugError, Result};
