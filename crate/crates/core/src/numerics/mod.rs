//! Dense `f64` arrays, forward kernels, a reverse-mode tape, and a
//! finite-difference gradient oracle.

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckFailure, GradCheckOptions, GradCheckReport,
};
pub use ops::{conv1d, conv1d_out_len, layer_norm, matmul, matmul_nt, softmax_rows};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
