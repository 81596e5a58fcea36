//! Spoken language recognition toolkit: acoustic front-end, GMM and neural
//! posterior sources, i-vector extraction, a multiclass logistic-regression
//! back-end and evaluation metrics.

pub mod classifier;
pub mod corpusio;
pub mod error;
pub mod eval;
pub mod features;
pub mod gmm;
pub mod ivector;
pub mod matrix;
pub mod nnet;
pub mod pipeline;
pub mod stats;

pub use error::{LidError, Result};
pub use matrix::FeatureMatrix;
