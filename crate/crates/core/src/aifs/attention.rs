use super::layout::ModalityLayout;
use super::plan::{build_aifs_plan, causal_mask, AifsPlan};
use crate::error::{shape_err, Error, Result};
use crate::model::{Attention, FloatExec, Part, RowContext};
use crate::numerics::{masked_softmax_rows, matmul, Tensor, MASKED};

/// Scaled dot-product attention over `n_heads` equal column slices.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, mask: &Tensor) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return shape_err(format!(
            "attention inputs q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if n_heads == 0 || !q.cols().is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "{n_heads} heads do not divide {} features",
            q.cols()
        )));
    }
    let hd = q.cols() / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = (q.slice_cols(a, b)?, k.slice_cols(a, b)?, v.slice_cols(a, b)?);
        let scores = matmul(&qh, &kh.transpose())?.scale(scale);
        let p = masked_softmax_rows(&scores, mask)?;
        heads.push(matmul(&p, &vh)?);
    }
    Tensor::concat_cols(&heads)
}

fn run_layer(
    attn: &Attention,
    x: &Tensor,
    mask: &Tensor,
    positions: &[usize],
    layout: &ModalityLayout,
    plan: Option<&AifsPlan>,
) -> Result<Tensor> {
    let modalities = match plan {
        Some(p) => p.modalities(),
        None => layout.modalities(),
    };
    let rows = RowContext {
        modalities: &modalities,
        plan,
    };
    attn.forward(Part::Llm, 0, x, mask, positions, rows, &mut FloatExec)
}

/// Attention in the original token order with the standard causal mask.
pub fn naive_attention(x: &Tensor, layout: &ModalityLayout, attn: &Attention) -> Result<Tensor> {
    layout.check_rows(x)?;
    let positions: Vec<usize> = (0..x.rows()).collect();
    run_layer(attn, x, &causal_mask(x.rows()), &positions, layout, None)
}

/// Visual-first attention: reorder, apply the unified mask and remapped rotary
/// positions, then restore the original order.
pub fn aifs_attention(x: &Tensor, layout: &ModalityLayout, attn: &Attention) -> Result<Tensor> {
    layout.check_rows(x)?;
    let plan = build_aifs_plan(layout)?;
    let xr = plan.reorder_rows(x)?;
    let y = run_layer(attn, &xr, &plan.mask()?, &plan.position_ids, layout, Some(&plan))?;
    plan.restore_rows(&y)
}

/// Left-padded masks for a batch of reordered sequences.
#[derive(Debug, Clone)]
pub struct BatchMasks {
    pub max_len: usize,
    /// Number of leading pad slots for each member.
    pub pads: Vec<usize>,
    pub plans: Vec<AifsPlan>,
    pub masks: Vec<Tensor>,
}

/// Pads every member on the left to the longest sequence.
///
/// Real queries never see pad keys. Pad queries attend causally among pads
/// only, so no softmax row is empty; their outputs are discarded.
pub fn multibatch_masks(layouts: &[ModalityLayout]) -> Result<BatchMasks> {
    if layouts.is_empty() {
        return Err(Error::Empty("batch has no sequences"));
    }
    let max_len = layouts.iter().map(ModalityLayout::len).max().unwrap_or(0);
    let mut out = BatchMasks {
        max_len,
        pads: Vec::with_capacity(layouts.len()),
        plans: Vec::with_capacity(layouts.len()),
        masks: Vec::with_capacity(layouts.len()),
    };
    for layout in layouts {
        let plan = build_aifs_plan(layout)?;
        let inner = plan.mask()?;
        let pad = max_len - layout.len();
        let mask = Tensor::from_fn(max_len, max_len, |i, j| match (i < pad, j < pad) {
            (true, true) if j <= i => 0.0,
            (false, false) => inner.get(i - pad, j - pad),
            _ => MASKED,
        });
        out.pads.push(pad);
        out.plans.push(plan);
        out.masks.push(mask);
    }
    Ok(out)
}

/// Runs [`aifs_attention`] for every member of a left-padded batch and returns
/// each member's real rows in original order.
pub fn aifs_attention_batch(xs: &[Tensor], layouts: &[ModalityLayout], attn: &Attention) -> Result<Vec<Tensor>> {
    if xs.len() != layouts.len() {
        return shape_err(format!("{} inputs for {} layouts", xs.len(), layouts.len()));
    }
    let batch = multibatch_masks(layouts)?;
    let mut outs = Vec::with_capacity(xs.len());
    for (b, (x, layout)) in xs.iter().zip(layouts).enumerate() {
        layout.check_rows(x)?;
        let (pad, plan) = (batch.pads[b], &batch.plans[b]);
        let padded = Tensor::concat_rows(&[Tensor::zeros(pad, x.cols()), plan.reorder_rows(x)?])?;
        let positions: Vec<usize> = std::iter::repeat_n(0, pad)
            .chain(plan.position_ids.iter().copied())
            .collect();
        let mut modalities = vec![super::Modality::Text; pad];
        modalities.extend(plan.modalities());
        let rows = RowContext {
            modalities: &modalities,
            plan: None,
        };
        let y = attn.forward(Part::Llm, 0, &padded, &batch.masks[b], &positions, rows, &mut FloatExec)?;
        outs.push(plan.restore_rows(&y.slice_rows(pad, batch.max_len)?)?);
    }
    Ok(outs)
}
