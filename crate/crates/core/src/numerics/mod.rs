//! Minimal differentiable tensor core.

pub mod container;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, Probe};
pub use graph::{Gradients, Graph, MaskBits, SparseMap, Unary, Var};
pub use optim::{AdamWConfig, OptimState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
