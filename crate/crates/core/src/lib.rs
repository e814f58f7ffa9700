//! Logical and structural anomaly detection on images by combining a
//! hierarchical vector-quantized reconstruction model with a masked
//! transformer that predicts code histograms of hidden regions.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hvq;
pub mod io;
pub mod lavit;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tensor;

pub use config::RunConfig;
pub use pipeline::PipelineError;
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type HvqModel32 = hvq::HvqModel<f32>;
pub type HvqModel64 = hvq::HvqModel<f64>;
pub type LavitModel32 = lavit::LavitModel<f32>;
pub type LavitModel64 = lavit::LavitModel<f64>;
