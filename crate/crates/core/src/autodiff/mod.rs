//! Minimal differentiable primitives with hand-written vector-Jacobian
//! products. Pipelines are fixed compositions of these layers; there is no
//! general computation graph.

pub mod adam;
pub mod blocks;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod norm;
pub mod ops;
pub mod param;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use blocks::{Dense, Relu};
pub use conv::Conv2d;
pub use gradcheck::{gradcheck, GradCheckReport, GradProblem};
pub use norm::{BatchNorm, NormMode};
pub use ops::Linear;
pub use param::{Module, Param};
pub use tensor::Tensor;
