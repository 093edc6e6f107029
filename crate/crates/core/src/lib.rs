//! Two-stream spatial/temporal transformers for identifying people from
//! sequences of COCO-WholeBody keypoints.

pub mod autodiff;
pub mod efficiency;
pub mod error;
pub mod gradcheck;
pub mod keypoints;
pub mod models;
pub mod nn;
pub mod optim;
pub mod report;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
pub type StrModel32 = models::StrModel<f32>;
pub type StrModel64 = models::StrModel<f64>;
pub type TtrModel32 = models::TtrModel<f32>;
pub type TtrModel64 = models::TtrModel<f64>;
pub type MsTtrModel32 = models::MsTtrModel<f32>;
pub type MsTtrModel64 = models::MsTtrModel<f64>;
pub type DualStreamModel32 = models::DualStreamModel<f32>;
pub type DualStreamModel64 = models::DualStreamModel<f64>;
