pub mod boundary;
pub mod config;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use mask::{BinaryMask, LabelMask, ProbMap};
pub use tensor::{no_grad, DType, Padding, ParamStore, Scalar, Tensor};
