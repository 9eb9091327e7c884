// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ablation studies on small image classifiers.

pub mod ablation;
pub mod cli;
pub mod data;
pub mod embed;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod nn;
pub mod results;
pub mod stats;

pub use error::{Error, Result};
