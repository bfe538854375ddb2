//! File formats, synthetic data, the post-processing benchmark and the
//! `detlab` command line on top of [`detlab_core`].

pub mod archive;
pub mod bench;
pub mod cli;
pub mod commands;
pub mod config;
pub mod cost_table;
pub mod dataset;
pub mod error;
pub mod json;
pub mod synth;

pub use error::{Error, Result};
