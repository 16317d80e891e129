pub mod c2w;
pub mod charset;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod i2c;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use config::{BackboneConfig, ModelConfig};
pub use error::{Error, Result};
pub use model::I2c2w;
pub use scalar::Scalar;
pub use tensor::Matrix;
pub use trainer::TrainConfig;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Model32 = I2c2w<f32>;
pub type Model64 = I2c2w<f64>;
