//! Dense numerical core: matrices, forward kernels, a reverse-mode tape, gradient
//! checking and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod matrix;
mod mlp;
pub mod ops;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{Init, Mlp, MlpVars};
pub use tape::{Gradients, Tape, Var, PROB_CLAMP};
