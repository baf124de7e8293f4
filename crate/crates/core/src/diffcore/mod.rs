//! Minimal reverse-mode differentiable tensor engine.

mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{BatchStats, Tape, Var, BN_EPS};
pub use tensor::Tensor;

pub(crate) use tape::sym_normalize_values;
