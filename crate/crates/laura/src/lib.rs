//! Toolkit for analyzing language bias in multilingual retrieval-augmented
//! generation pipelines and for constructing answer-utility-driven listwise
//! training data for rerankers.
//!
//! All model inference (retrieval, reranking, generation) is delegated to
//! external HTTP services; deterministic mocks make the whole pipeline
//! testable at desk scale.

pub mod config;
pub mod corpus;
pub mod distributions;
pub mod laura_data;
pub mod listwise_loss;
pub mod metrics;
pub mod pipeline;
pub mod services;
pub mod stats;

mod error;
pub use error::Error;

/// `Result` alias used across the toolkit.
pub type Result<T> = std::result::Result<T, Error>;
