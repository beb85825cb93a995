pub mod autodiff;
pub mod context;
pub mod data;
pub mod experiments;
pub mod error;
pub mod features;
pub mod init;
pub mod layers;
pub mod model;
pub mod recurrent;
pub mod scalar;
pub mod sequence;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations of the generic types.
pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type BatchNormLayer = layers::BatchNormLayer<f64>;
pub type QuestionDetector = model::QuestionDetector<f64>;
pub type Optimizer = training::Optimizer<f64>;
