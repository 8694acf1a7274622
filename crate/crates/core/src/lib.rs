//! Query-adaptive retrieval with hypernetwork-generated low-rank transforms.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod hypernet;
pub mod io;
pub mod par;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
