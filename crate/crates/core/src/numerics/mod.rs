//! Dense matrices, a reverse-mode tape over them, and a finite-difference
//! oracle for checking the tape.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_grad, relative_error, FD_STEP};
pub use matrix::{gelu, gelu_grad, sigmoid, topk_indices, Matrix, TopK, COSINE_EPS};
pub use tape::{Gradients, Tape, Var};
