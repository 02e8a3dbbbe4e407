//! Self-supervised temporal-context pretraining on video frame pairs and
//! GRU-based online surgical phase segmentation.

pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod datapipe;
pub mod netarch;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
