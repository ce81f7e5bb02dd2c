//! Attentive covariance pooling for speaker embeddings.
//!
//! Frame-level features of a segment are pooled into a fixed-length row made
//! of any combination of mean, standard deviation and a compressed covariance
//! vector, optionally weighted by self-attention. The covariance is reduced to
//! a `D`-vector by a trainable weight that semi-orthogonal constraint steps
//! keep on the unit sphere.
//!
//! Around the pooling layer sit a small time-delay frame encoder, segment
//! affine layers with an additive-margin softmax head, a deterministic SGD
//! trainer, a synthetic speaker corpus and verification metrics (EER, minDCF,
//! DET). All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! pipeline itself runs in `f64`, see the aliases below.

pub mod ablation;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod embednet;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod init;
pub mod pooling;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type FeatureSequence64 = pooling::FeatureSequence<f64>;
pub type SemiOrthVector64 = pooling::SemiOrthVector<f64>;
pub type AttentionParams64 = pooling::AttentionParams<f64>;
pub type EmbeddingModel64 = embednet::EmbeddingModel<f64>;
pub type Corpus64 = corpus::Corpus<f64>;
