//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
mod params;
pub mod rng;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckOptions, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tensor::{cross_entropy, matmul, matmul_nt, sinusoidal_embedding, softmax_rows, Tensor};

pub(crate) use tensor::{dot, gelu, gemm_nn, layer_norm_rows, rope_in_place, softmax_row_into};
