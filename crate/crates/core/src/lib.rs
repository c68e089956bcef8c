//! Bidirectional image/report generation over longitudinal toy studies with
//! a causal FAVOR+ transformer.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod generation;
pub mod layout;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
