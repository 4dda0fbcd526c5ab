//! Gradient amplification for Byzantine-robust federated aggregation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`nn`]: a small dense/convolutional network engine with
//!   manual backpropagation that also exposes the last convolutional layer's
//!   feature maps and their gradients.
//! * [`data`]: dataset synthesis and ingestion, client partitioning, trigger
//!   stamping and server-side validation sampling.
//! * [`attacks`]: malicious update construction.
//! * [`amplifier`]: max-filter and Grad-CAM guided gradient amplification.
//! * [`aggregators`]: density, prediction and trust based screening on top of
//!   FedAvg.
//! * [`metrics`]: accuracy loss, attack success rate, negative pulse and
//!   dataset heterogeneity.
//!
//! All numerical code is generic over [`Scalar`]; the simulator uses the
//! `f64` aliases exported here.

pub mod aggregators;
pub mod amplifier;
pub mod attacks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model64 = nn::ModelParams<f64>;
pub type Model32 = nn::ModelParams<f32>;
pub type Gradients64 = nn::GradientSet<f64>;
pub type Gradients32 = nn::GradientSet<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Amplified64 = amplifier::AmplifiedGradient<f64>;
pub type Decision64 = aggregators::AggregationDecision<f64>;
