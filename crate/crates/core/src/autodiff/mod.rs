//! Dense-tensor reverse-mode automatic differentiation.

pub mod cases;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{analytic_grads, finite_diff_check, finite_diff_check_many, rel_err, GradCheckReport};
pub use graph::{with_backward_fault, OP_NAMES, BatchStats, Graph, NormMode, Var};
pub use optim::{adamw_step, AdamW, AdamWConfig, Moments};
pub use params::{ParamEntry, ParamStore, CKPT_MAGIC};
pub use tensor::{matmul_plain, Tensor};
pub(crate) use tensor::gemm;

#[cfg(test)]
mod tests;
