// SPDX-License-Identifier: Apache-2.0

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod parallel;
pub mod parser;
pub mod pipeline;
pub mod seed;
pub mod session;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
