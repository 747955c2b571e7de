//! Channel-wise mixed-precision quantization of frozen sequential
//! recommenders, personalized per device by cloud-side hypernetworks.

pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod quant;
pub mod saliency;
pub mod sim;
pub mod strategy;
pub mod tensor;
pub mod training;
mod wire;

pub use error::{Error, Result};
