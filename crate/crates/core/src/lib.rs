//! Melody extraction from polyphonic audio: spectral front end, label maps,
//! a small tensor/autodiff engine, the tone-octave network, training and
//! evaluation.
//!
//! Modules are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix `f64`.

pub mod autodiff;
pub mod datagen;
pub mod dsp;
pub mod evaluation;
pub mod inference;
pub mod labels;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tcfp;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;
pub use tensor::TensorError;

pub type Tensor = tensor::Tensor<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Graph<'p> = autodiff::Graph<'p, f64>;
pub type TONet = model::TONet<f64>;
