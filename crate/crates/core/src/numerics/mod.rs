//! Dense `f64` matrices, a recorded compute graph with reverse-mode
//! gradients, and a finite-difference gradient checker.

mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, PathCheck};
pub use graph::{Graph, NodeId};
pub use ops::{cosine_similarity, layer_norm, matmul, softmax, sum_pool, LAYER_NORM_EPS};
pub use params::{Gradients, ParamStore};
pub use tensor::Tensor;
