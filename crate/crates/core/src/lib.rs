//! Counterfeit-goods detection: a small VGG-style CNN engine, a two-phase
//! transfer-learning trainer, dataset tooling with a synthetic generator,
//! evaluation metrics and the multi-stage authenticity pipeline.

pub mod data;
pub mod detect;
pub mod eval;
pub mod nn;
pub mod train;
pub mod rng;

pub use nn::{Model, ModelConfig, Tensor};

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
