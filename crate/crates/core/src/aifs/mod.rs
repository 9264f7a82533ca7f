//! Modality-specific static activation scales and visual-first token reordering.
//!
//! Reordering places every visual token before the text tokens. The causal
//! mask and rotary positions are permuted with the tokens, so attention
//! outputs are unchanged once the original order is restored.

mod attention;
mod layout;
mod msq;
mod plan;
mod rope;

pub use attention::{
    aifs_attention, aifs_attention_batch, multi_head_attention, multibatch_masks, naive_attention, BatchMasks,
};
pub use layout::{Modality, ModalityLayout, Segment};
pub use msq::{calibrate_msq, quantize_msq, quantize_msq_rows, MsqCalibrator, MsqParams};
pub use plan::{build_aifs_plan, causal_mask, permuted_mask_oracle, unified_causal_mask, AifsPlan};
pub use rope::{remap_rope, Rope, DEFAULT_THETA_BASE};
