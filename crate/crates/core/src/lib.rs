//! Set prediction of concurrent human activities from WiFi CSI amplitudes,
//! with a convolutional edge backbone, residual vector quantization of its
//! features and a transformer set decoder in the cloud.

// `!(x >= 0.0)` style checks reject NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod csi;
pub mod edge_cloud;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rvq;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};

/// Scalar type of training and deployment.
pub type Real = f32;
pub type Model = model::AmarModel<Real>;
pub type EdgeRole = edge_cloud::Edge<Real>;
pub type CloudRole = edge_cloud::Cloud<Real>;
pub type Features = tensor::Tensor<Real>;
/// Double-precision model for finite-difference checks.
pub type CheckModel = model::AmarModel<f64>;
