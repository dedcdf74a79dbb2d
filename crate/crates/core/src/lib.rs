//! Lung segmentation from CT with a dilated residual network.

pub mod error;
pub mod kv;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor4;
