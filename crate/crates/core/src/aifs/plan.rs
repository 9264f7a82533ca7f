use serde::{Deserialize, Serialize};

use super::layout::{Modality, ModalityLayout};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, MASKED};

/// Visual-first reordering of a mixed token sequence.
///
/// Slot `i` of the reordered sequence holds original token `perm[i]`; visual
/// tokens occupy slots `[0, visual_count)` and each modality keeps its original order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AifsPlan {
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
    pub visual_count: usize,
    /// Original index of the token in each reordered slot; drives rotary positions.
    pub position_ids: Vec<usize>,
    single_span: Option<(usize, usize)>,
}

pub fn build_aifs_plan(layout: &ModalityLayout) -> Result<AifsPlan> {
    if layout.is_empty() {
        return Err(Error::Empty("cannot reorder an empty layout"));
    }
    let tags = layout.modalities();
    let visual = tags
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == Modality::Visual)
        .map(|(i, _)| i);
    let text = tags
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == Modality::Text)
        .map(|(i, _)| i);
    let perm: Vec<usize> = visual.chain(text).collect();
    let mut inv_perm = vec![0; perm.len()];
    for (slot, &orig) in perm.iter().enumerate() {
        inv_perm[orig] = slot;
    }
    Ok(AifsPlan {
        position_ids: perm.clone(),
        visual_count: layout.visual_count(),
        single_span: layout.single_visual_span(),
        perm,
        inv_perm,
    })
}

impl AifsPlan {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn reorder_rows(&self, x: &Tensor) -> Result<Tensor> {
        x.gather_rows(&self.perm)
    }

    pub fn restore_rows(&self, x: &Tensor) -> Result<Tensor> {
        x.gather_rows(&self.inv_perm)
    }

    /// Modality of each reordered slot.
    pub fn modalities(&self) -> Vec<Modality> {
        (0..self.len())
            .map(|i| {
                if i < self.visual_count {
                    Modality::Visual
                } else {
                    Modality::Text
                }
            })
            .collect()
    }

    /// Causal mask for the reordered sequence: the closed form for zero or one
    /// visual run, permutation conjugation of the standard mask otherwise.
    pub fn mask(&self) -> Result<Tensor> {
        if self.visual_count == 0 || self.single_span.is_some() {
            unified_causal_mask(self.single_span, self.len())
        } else {
            permuted_mask_oracle(&self.perm, self.len())
        }
    }
}

/// Standard causal mask: position `j` visible from `i` iff `j <= i`.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(len, len, |i, j| if j <= i { 0.0 } else { MASKED })
}

/// Closed-form causal mask of the visual-first sequence for one visual run.
///
/// `span` is the inclusive zero-based `(m, n)` of the visual tokens in the
/// original order; `None` means there are none. With `c = n - m`, entry `(i, j)` is visible when
/// * `i <= c` and (`j <= i` or `c < j <= n`): a visual token sees earlier
///   visual tokens and the text that preceded the image;
/// * `c < i <= n` and `c < j <= i`: leading text sees earlier leading text;
/// * `i > n` and `j <= i`: trailing text sees everything before it.
pub fn unified_causal_mask(span: Option<(usize, usize)>, len: usize) -> Result<Tensor> {
    let Some((m, n)) = span else {
        return Ok(causal_mask(len));
    };
    if m > n || n >= len {
        return Err(Error::Config(format!(
            "visual span ({m}, {n}) invalid for {len} tokens"
        )));
    }
    let c = n - m;
    Ok(Tensor::from_fn(len, len, |i, j| {
        let visible =
            (i <= c && (j <= i || (c < j && j <= n))) || (c < i && i <= n && c < j && j <= i) || (i > n && j <= i);
        if visible {
            0.0
        } else {
            MASKED
        }
    }))
}

/// `M'[i][j] = M[perm[i]][perm[j]]` for the standard causal mask `M`.
pub fn permuted_mask_oracle(perm: &[usize], len: usize) -> Result<Tensor> {
    if perm.len() != len {
        return Err(Error::Config(format!(
            "permutation of length {} for {len} tokens",
            perm.len()
        )));
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Config(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(Tensor::from_fn(
        len,
        len,
        |i, j| {
            if perm[j] <= perm[i] {
                0.0
            } else {
                MASKED
            }
        },
    ))
}
