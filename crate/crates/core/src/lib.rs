//! Contrastive representation learning for multivariate time series with
//! bilinear temporal-spectral fusion.

pub mod augment;
pub mod data;
pub mod eval;
pub mod encoders;
pub mod fusion;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;
