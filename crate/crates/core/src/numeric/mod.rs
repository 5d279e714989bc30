//! Dense matrices and the differentiation tape every learnable layer runs on.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{softmax_rows, Gradients, Tape, Var};
