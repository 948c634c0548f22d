//! Context-aware compressed transformer for phishing email detection.

pub mod error;
pub mod eval;
pub mod mail;
pub mod model;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;

pub type Model = model::CatBertModel<f32>;
pub type Model64 = model::CatBertModel<f64>;
