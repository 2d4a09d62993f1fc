pub mod highlight;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod relevance;
pub mod scalar;
pub mod synth;
pub mod table;
pub mod train;
pub mod vocab;

pub use model::GatedQaModel;
pub use scalar::Scalar;

/// Single-precision model used for training runs.
pub type Model32 = GatedQaModel<f32>;
/// Double-precision model used for gradient checking.
pub type Model64 = GatedQaModel<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
