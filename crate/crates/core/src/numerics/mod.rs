//! Dense linear-algebra substrate shared by every other module.

pub mod io;
mod ops;
mod tensor;

pub use ops::{
    column_means, cosine_similarity, frobenius_norm, gelu, layer_norm, masked_softmax_rows, matmul, mse, rms_norm,
    row_means, silu, NormParams, MASKED,
};
pub use tensor::Tensor;
