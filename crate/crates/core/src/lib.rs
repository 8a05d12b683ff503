//! OneTrans: a unified Transformer backbone for ranking that tokenizes
//! behavior sequences and non-sequential features into one token stream.

pub mod bench;
pub mod config;
pub mod error;
pub mod features;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod block;
pub mod cache;
pub mod checkpoint;
pub mod stack;
pub mod tokenizer;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use numerics::{FlopCounter, FlopReport, Matrix, Phase, Real};
