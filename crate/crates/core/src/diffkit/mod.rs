//! Minimal reverse-mode differentiation for the adapter's fixed layer set.
//!
//! A [`Tape`] records primitive applications (products, sums, scaling,
//! layer norm, activation, softmax losses) with their forward values; the
//! reverse pass applies hand-written adjoint rules. The matrix exponential
//! is recorded as its scaling-and-squaring composition, so its gradient is
//! exact for the truncated series that is actually evaluated.

mod gradcheck;
mod loss;
mod tape;

pub use gradcheck::{
    check_layer, grad_check, relative_error, GradCheckConfig, GradCheckReport, LayerKind,
    GRAD_CHECK_TOLERANCE,
};
pub use loss::{cross_entropy, kl_loss, kl_loss_batch, kl_loss_grad, log_softmax, softmax};
pub use tape::{
    backprop, Activation, BackwardFault, GradientSet, NodeId, ParamId, Tape, LAYER_NORM_EPS,
};
pub(crate) use tape::{add_row_bias, layer_norm};
