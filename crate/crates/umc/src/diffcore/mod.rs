//! Differentiable-numerics substrate: dense tensors, the recorded-op tape
//! with reverse-mode gradients, and the finite-difference verification
//! harness that everything downstream is gated on.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{
    check_all_ops, check_op, check_param_map, finite_diff_gradient, finite_diff_gradient_scaled,
    op_set_forward, CheckSettings, GradCheckReport, OpInstance, OP_NAMES,
};
pub use tape::{AttnMask, Tape, VarId};
pub use tensor::{Real, Tensor};
