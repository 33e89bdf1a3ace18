//! Differentiable-computation substrate: tensors, the reverse-mode tape, and
//! the finite-difference gradient checker.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, CoordSelection, GradCheckOptions, GradCheckReport};
pub use tape::{grads_by_path, linear, staged_param, BufId, Gradients, Staged, Tape, LOG_ZERO};
pub use tensor::{
    cosine_similarity, log_sum_exp, softmax_stable, Param, ParameterSet, Tensor, COSINE_EPS,
};
