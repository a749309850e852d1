pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod flows;
pub mod infer;
pub mod model;
pub mod ndmath;
pub mod priors;
pub mod recognition;
pub mod synth;

pub use error::{Error, Result};
