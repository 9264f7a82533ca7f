//! Walsh–Hadamard transforms, incoherence diagnostics and model rotation.

mod rotate;
mod transform;

pub use rotate::{absorb_online, fold_norm_gains, rotate_llm, rotate_model_offline, rotate_vision, RotationSet};
pub use transform::{
    fht, fht_columns, fht_in_place, fht_rows, first_row_projection_check, incoherence, incoherence_ratio,
    walsh_hadamard,
};
