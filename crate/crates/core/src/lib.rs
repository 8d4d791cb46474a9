//! Domain-adaptive embedding learning by coupling adversarial feature
//! alignment with pseudo-label driven global-local distance optimization.
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the `*64`
//! aliases below are the concrete types used by the trainer and CLI.

pub mod camera_weighting;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod label_prediction;
pub mod linalg;
pub mod models;
pub mod objectives;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type FeatureBank64 = embedding::FeatureBank<f64>;
pub type DistanceMatrix64 = label_prediction::DistanceMatrix<f64>;
pub type CameraGapTable64 = camera_weighting::CameraGapTable<f64>;
pub type LossResult64 = objectives::LossResult<f64>;
