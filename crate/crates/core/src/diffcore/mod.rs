//! Dense tensors, reverse-mode differentiation, momentum SGD and a
//! finite-difference gradient checker.

mod gradcheck;
mod init;
pub(crate) mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use init::{glorot_uniform, poly_filter_uniform};
pub use optim::OptimizerState;
pub use params::{Bound, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
