//! Residual-block extraction, fidelity metrics, certificates and verification
//! for small decoder-only transformers.

pub mod archive;
pub mod bundle;
pub mod canonical;
pub mod cert;
pub mod cli;
pub mod compose;
pub mod config;
pub mod digest;
pub mod edit;
pub mod error;
pub mod ir;
pub mod metrics;
pub mod model;
pub mod npy;
pub mod pipeline;
pub mod prompts;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
