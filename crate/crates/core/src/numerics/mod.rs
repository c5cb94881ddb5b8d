//! Dense `f64` tensors, a recording tape for reverse-mode gradients, and a
//! finite-difference checker for that tape.

pub mod batch_norm;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use batch_norm::{batch_norm, BatchNormState, Mode};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, GradEntry};
pub use param::{ParamSet, Parameter};
pub use tape::{AttentionShape, Graph, Var};
pub use tensor::{sigmoid, Tensor};
