//! Post-training quantization toolkit for a toy multimodal transformer.
//!
//! The crate covers modality-specific static activation scales, visual-first
//! token reordering with an equivalent causal mask and remapped rotary
//! positions, LayerNorm-to-RMSNorm rewriting, Hadamard rotation, and splitting
//! of the rotation-induced first-row weight outlier into a separate GEMV.

pub mod aifs;
pub mod error;
pub mod hadamard;
pub mod model;
pub mod norm_rewrite;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod rms;

pub use error::{Error, Result};
