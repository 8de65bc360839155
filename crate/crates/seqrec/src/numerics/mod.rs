//! Dense linear algebra, differentiable graph, and the optimizer.
//!
//! Everything is `f64` and row-major. The compute style is deliberately
//! plain: explicit loops, no SIMD, no threads, so that runs are bit-for-bit
//! reproducible across machines.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod matrix;
pub mod param;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use kernels::{
    add_row_broadcast, attention, attention_masked, cross_entropy, ffn, info_nce,
    l2_normalize_rows, layer_norm_rows, softmax_rows,
};
pub use matrix::{matmul, matmul_nt, matmul_tn, MaskMatrix, Matrix};
pub use param::{Param, ParamId, ParamStore};
