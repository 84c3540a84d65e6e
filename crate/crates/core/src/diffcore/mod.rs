//! Reverse-mode automatic differentiation over dense rank-2 tensors.

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, RELATIVE_ERROR_FLOOR};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{silu, silu_grad, CustomOp, Tape, Var, LEAKY_RELU_SLOPE};
