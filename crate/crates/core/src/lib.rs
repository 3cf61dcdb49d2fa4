//! A language model built from Discrete Mamba-2 mixers, distilled
//! from a softmax-attention teacher and served with a constant-size
//! recurrent state.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod io;
pub mod linear;
pub mod mixer;
pub mod model;
pub mod mohawk;
pub mod params;
pub mod quant;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Llamba32 = model::LlambaModel<f32>;
pub type Llamba64 = model::LlambaModel<f64>;
pub type Teacher32 = model::TeacherModel<f32>;
pub type Teacher64 = model::TeacherModel<f64>;
