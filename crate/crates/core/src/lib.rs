//! Guard-model library: byte-level transformer encoders with linear,
//! residual-MLP, random-forest and gradient-boosted heads for two-label
//! prompt screening (jailbreak / prompt injection), plus training,
//! evaluation and serialization.

pub mod bench;
pub mod classify;
pub mod container;
pub mod datasets;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod forests;
pub mod heads;
pub mod labels;
pub mod model;
pub mod pooling;
pub mod training;
pub mod hashing;

pub use error::{Error, Result};
