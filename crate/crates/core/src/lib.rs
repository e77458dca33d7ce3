//! Writer-adaptive offline signature verification.
//!
//! A small convolutional network is meta-trained across many writers so that
//! a few gradient steps on a new writer's genuine references produce a
//! writer-specific genuine/forgery classifier. The crate contains the
//! differentiation engine, the network, image preprocessing, a synthetic
//! corpus generator, episodic sampling, meta-training, the evaluation
//! metrics and on-disk formats.
//!
//! The numerical core is generic over [`Scalar`]; the aliases below fix it to
//! `f32`, the precision used for training and deployment.

pub mod diffcore;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod metalearn;
pub mod netmodel;
pub mod preprocess;
pub mod scalar;
pub mod store;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f32>;
pub type Graph = diffcore::Graph<f32>;
pub type ParameterSet = netmodel::ParameterSet<f32>;
pub type Tensor64 = diffcore::Tensor<f64>;
pub type Graph64 = diffcore::Graph<f64>;
pub type ParameterSet64 = netmodel::ParameterSet<f64>;
