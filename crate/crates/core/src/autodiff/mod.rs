//! Dense tensors and a define-by-run graph with reverse-mode gradients.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, GradcheckReport, DEFAULT_STEP};
pub use graph::{BatchMoments, Gradients, Graph, NormMode, Var};
pub use kernels::ConvOptions;
pub use tensor::{Precision, Tensor};
