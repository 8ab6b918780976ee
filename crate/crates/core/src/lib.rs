//! Liver-lesion segmentation laboratory: a CPU autodiff engine, UNet and
//! UNet3+ models with ResNet encoders and attention variants, CE + Dice
//! training, segmentation metrics, Grad-CAM, and a CT slice pipeline.

pub mod attention;
pub mod data;
pub mod error;
pub mod exec;
pub mod explain;
mod gemm;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
