//! Class-agnostic anomaly detection over multi-layer feature maps.

mod codec;
pub mod constraintor;
pub mod error;
pub mod features;
pub mod flow;
pub mod pipeline;
pub mod residual;
pub mod scoring;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
