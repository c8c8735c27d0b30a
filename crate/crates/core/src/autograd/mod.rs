mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_grad, GradCheck};
pub use tape::{Gradients, NormOutput, Tape, Var};
