//! Dense and CSR matrices, the handful of differentiable ops the model needs,
//! and Adam.

mod dense;
pub mod ops;
mod param;
mod sparse;

pub use dense::DenseMatrix;
pub use ops::{
    activation, activation_backward, affine, affine_backward, bce_with_logits,
    bce_with_logits_backward, sigmoid, Activation,
};
pub use param::{adam_step, glorot_init, AdamConfig, ParamTensor};
pub use sparse::SparseMatrix;
