//! Differentiable-computation substrate: dense tensors, a reverse-mode
//! tape over a fixed primitive set, and finite-difference certification.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
