//! LLM-Codec: a neural audio codec trained jointly with language-model
//! facing objectives, plus the evaluation harness used to compare it with
//! a reconstruction-only codec.

pub mod adversarial;
pub mod align;
pub mod audio;
pub mod backbone;
pub mod bridge;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod ftp;
pub mod guards;
pub mod optim;
pub mod params;
pub mod recon;
pub mod rng;
pub mod schedule;
pub mod spectral;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
