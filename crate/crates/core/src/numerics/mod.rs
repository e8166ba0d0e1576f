//! Dense f64 matrices, the primitive operation set, and reverse-mode gradients.

mod backend;
mod gradcheck;
mod init;
mod tape;
mod tensor;

pub use backend::{Backend, Eval};
pub use gradcheck::{finite_diff_check, finite_diff_check_with_floor};
pub use init::orthogonal;
pub use tape::{grad, Gradients, Tape, Var};
pub use tensor::{elu, max_abs_diff, outer, relu, sigmoid, softmax_rows, Matrix2, Vector};

