use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transform::{fht_columns, walsh_hadamard};
use crate::error::{shape_err, Error, Result};
use crate::model::{Linear, Norm, NormKind, OnlineHadamard, Part, ToyMllm};
use crate::numerics::{matmul, Tensor};

/// Offline residual-stream rotations for each part plus the online transforms
/// applied to down-projection inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSet {
    pub llm: Tensor,
    pub vision: Tensor,
    pub online_llm: Option<OnlineHadamard>,
    pub online_vision: Option<OnlineHadamard>,
    pub randomized: bool,
}

fn random_signs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

impl RotationSet {
    pub fn identity(d_model: usize) -> Self {
        Self {
            llm: Tensor::identity(d_model),
            vision: Tensor::identity(d_model),
            online_llm: None,
            online_vision: None,
            randomized: false,
        }
    }

    /// Plain Walsh–Hadamard everywhere.
    pub fn hadamard(d_model: usize) -> Result<Self> {
        let h = walsh_hadamard(d_model)?;
        Ok(Self {
            llm: h.clone(),
            vision: h,
            online_llm: Some(OnlineHadamard { signs: None }),
            online_vision: Some(OnlineHadamard { signs: None }),
            randomized: false,
        })
    }

    /// `diag(s) · H` offline and `(x ⊙ s) · H` online, with seeded signs.
    pub fn randomized(d_model: usize, d_ff: usize, seed: u64) -> Result<Self> {
        let h = walsh_hadamard(d_model)?;
        walsh_hadamard(d_ff)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signed = |rng: &mut ChaCha8Rng| {
            let s = random_signs(d_model, rng);
            Tensor::from_fn(d_model, d_model, |i, j| s[i] * h.get(i, j))
        };
        let llm = signed(&mut rng);
        let vision = signed(&mut rng);
        Ok(Self {
            llm,
            vision,
            online_llm: Some(OnlineHadamard {
                signs: Some(random_signs(d_ff, &mut rng)),
            }),
            online_vision: Some(OnlineHadamard {
                signs: Some(random_signs(d_ff, &mut rng)),
            }),
            randomized: true,
        })
    }

    /// Every offline matrix square and orthogonal within `1e-8`.
    pub fn validate(&self, d_model: usize) -> Result<()> {
        for q in [&self.llm, &self.vision] {
            if q.shape() != (d_model, d_model) {
                return shape_err(format!("rotation {:?} for width {d_model}", q.shape()));
            }
            let qqt = matmul(q, &q.transpose())?;
            if qqt.max_abs_diff(&Tensor::identity(d_model))? > 1e-8 {
                return Err(Error::Precondition("rotation matrix is not orthogonal".into()));
            }
        }
        Ok(())
    }
}

fn scale_rows(w: &Tensor, s: &[f64]) -> Tensor {
    Tensor::from_fn(w.rows(), w.cols(), |i, j| s[i] * w.get(i, j))
}

/// Folds an RMSNorm gain into the linear that reads its output and resets the norm.
fn fold_gain(norm: &mut Norm, readers: &mut [&mut Linear]) -> Result<()> {
    if norm.kind != NormKind::RmsNorm {
        return Err(Error::Precondition(
            "gain folding needs RMSNorm; rewrite LayerNorm blocks first".into(),
        ));
    }
    for l in readers.iter_mut() {
        if l.d_in() != norm.params.dim() {
            return shape_err(format!(
                "norm width {} feeds a {}-input linear",
                norm.params.dim(),
                l.d_in()
            ));
        }
        l.weight = scale_rows(&l.weight, &norm.params.alpha);
    }
    let d = norm.params.dim();
    norm.params.alpha = vec![1.0; d];
    norm.params.beta = vec![0.0; d];
    Ok(())
}

/// Moves every RMSNorm gain of `part` into the following linear layers.
pub fn fold_norm_gains(model: &mut ToyMllm, part: Part) -> Result<()> {
    match part {
        Part::Vision => {
            for b in &mut model.vision.blocks {
                fold_gain(&mut b.norm1, &mut [&mut b.attn.qkv])?;
                fold_gain(&mut b.norm2, &mut [&mut b.mlp.up])?;
            }
            fold_gain(&mut model.vision.final_norm, &mut [&mut model.projector])
        }
        Part::Llm => {
            for b in &mut model.llm.blocks {
                fold_gain(&mut b.norm1, &mut [&mut b.attn.qkv])?;
                fold_gain(&mut b.norm2, &mut [&mut b.mlp.up])?;
            }
            fold_gain(&mut model.llm.final_norm, &mut [&mut model.llm.head])
        }
        Part::Projector => Err(Error::Precondition("the projector has no norms".into())),
    }
}

/// Residual reader: `W ← Qᵀ W`.
fn rotate_input(l: &mut Linear, q: &Tensor) -> Result<()> {
    l.weight = matmul(&q.transpose(), &l.weight)?;
    Ok(())
}

/// Residual writer: `W ← W Q`, `b ← b Q`.
fn rotate_output(l: &mut Linear, q: &Tensor) -> Result<()> {
    l.weight = matmul(&l.weight, q)?;
    l.bias = matmul(&Tensor::row_vector(&l.bias)?, q)?.into_data();
    Ok(())
}

/// `W ← H · (D · W)` so that the online-transformed input gives the same product.
pub fn absorb_online(l: &mut Linear, t: &OnlineHadamard) -> Result<()> {
    let w = match &t.signs {
        Some(s) if s.len() != l.d_in() => return shape_err(format!("{} signs for {} inputs", s.len(), l.d_in())),
        Some(s) => scale_rows(&l.weight, s),
        None => l.weight.clone(),
    };
    l.weight = fht_columns(&w)?;
    Ok(())
}

fn check_unrotated(blocks: &[crate::model::Block], what: &str) -> Result<()> {
    if blocks.iter().any(|b| b.mlp.online_hadamard.is_some()) {
        return Err(Error::Precondition(format!("{what} is already rotated")));
    }
    Ok(())
}

/// Rotates the language model's residual stream. Text embedding and projector
/// outputs absorb `Q`; the head absorbs `Qᵀ`.
pub fn rotate_llm(model: &ToyMllm, r: &RotationSet) -> Result<ToyMllm> {
    r.validate(model.d_model())?;
    check_unrotated(&model.llm.blocks, "language model")?;
    let mut m = model.clone();
    fold_norm_gains(&mut m, Part::Llm)?;
    let q = &r.llm;
    rotate_output(&mut m.text_embed, q)?;
    rotate_output(&mut m.projector, q)?;
    for b in &mut m.llm.blocks {
        rotate_input(&mut b.attn.qkv, q)?;
        rotate_output(&mut b.attn.out, q)?;
        rotate_input(&mut b.mlp.up, q)?;
        rotate_output(&mut b.mlp.down, q)?;
        if let Some(t) = &r.online_llm {
            absorb_online(&mut b.mlp.down, t)?;
            b.mlp.online_hadamard = Some(t.clone());
        }
    }
    rotate_input(&mut m.llm.head, q)?;
    Ok(m)
}

/// Rotates the vision tower's residual stream; the projector input absorbs `Qᵀ`.
pub fn rotate_vision(model: &ToyMllm, r: &RotationSet) -> Result<ToyMllm> {
    r.validate(model.d_model())?;
    let has_ln = model
        .vision
        .blocks
        .iter()
        .flat_map(|b| b.norms())
        .chain(std::iter::once(&model.vision.final_norm))
        .any(|n| n.kind == NormKind::LayerNorm);
    if has_ln {
        return Err(Error::Precondition(
            "vision tower still uses LayerNorm; rewrite it to RMSNorm before rotating".into(),
        ));
    }
    check_unrotated(&model.vision.blocks, "vision tower")?;
    let mut m = model.clone();
    fold_norm_gains(&mut m, Part::Vision)?;
    let q = &r.vision;
    rotate_output(&mut m.vision.embed, q)?;
    for b in &mut m.vision.blocks {
        rotate_input(&mut b.attn.qkv, q)?;
        rotate_output(&mut b.attn.out, q)?;
        rotate_input(&mut b.mlp.up, q)?;
        rotate_output(&mut b.mlp.down, q)?;
        if let Some(t) = &r.online_vision {
            absorb_online(&mut b.mlp.down, t)?;
            b.mlp.online_hadamard = Some(t.clone());
        }
    }
    rotate_input(&mut m.projector, q)?;
    Ok(m)
}

/// Both rotations. The vision tower must already be RMSNorm-only.
pub fn rotate_model_offline(model: &ToyMllm, r: &RotationSet) -> Result<ToyMllm> {
    rotate_vision(&rotate_llm(model, r)?, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aifs::{Modality, ModalityLayout};
    use crate::model::ToyMllmConfig;
    use crate::norm_rewrite::preln_to_rmsnorm;
    use crate::numerics::frobenius_norm;

    fn tokens(layout: &ModalityLayout, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tags = layout.modalities();
        Tensor::from_fn(tags.len(), 64, |i, _| match tags[i] {
            Modality::Visual => rng.random_range(-20.0..10.0),
            Modality::Text => rng.random_range(-0.5..0.5),
        })
    }

    fn model() -> ToyMllm {
        ToyMllm::init(ToyMllmConfig::default()).unwrap()
    }

    #[test]
    fn identity_rotation_is_bit_exact_after_folding() {
        let m = preln_to_rmsnorm(&model()).unwrap();
        let mut folded = m.clone();
        fold_norm_gains(&mut folded, Part::Llm).unwrap();
        fold_norm_gains(&mut folded, Part::Vision).unwrap();
        let rotated = rotate_model_offline(&m, &RotationSet::identity(64)).unwrap();
        assert_eq!(rotated, folded);
    }

    #[test]
    fn hadamard_rotation_preserves_outputs_and_norms() {
        let base = preln_to_rmsnorm(&model()).unwrap();
        let r = RotationSet::hadamard(64).unwrap();
        let rotated = rotate_model_offline(&base, &r).unwrap();
        let layout = ModalityLayout::text_visual_text(3, 5, 4);
        let x = tokens(&layout, 1);
        let diff = rotated
            .forward_float(&x, &layout)
            .unwrap()
            .max_abs_diff(&base.forward_float(&x, &layout).unwrap())
            .unwrap();
        assert!(diff <= 1e-6, "{diff}");

        // offline rotation alone keeps Frobenius norms
        let mut folded = base.clone();
        fold_norm_gains(&mut folded, Part::Llm).unwrap();
        let offline_only = RotationSet { online_llm: None, ..r };
        let rot = rotate_llm(&base, &offline_only).unwrap();
        for (a, b) in folded.llm.blocks.iter().zip(&rot.llm.blocks) {
            for (x, y) in [(&a.attn.qkv, &b.attn.qkv), (&a.mlp.down, &b.mlp.down)] {
                let (fx, fy) = (frobenius_norm(&x.weight), frobenius_norm(&y.weight));
                assert!((fx - fy).abs() <= 1e-8 * fx);
            }
        }
    }

    #[test]
    fn randomized_rotation_is_orthogonal_and_lossless() {
        let base = preln_to_rmsnorm(&model()).unwrap();
        let r = RotationSet::randomized(64, 256, 9).unwrap();
        r.validate(64).unwrap();
        let rotated = rotate_model_offline(&base, &r).unwrap();
        let layout = ModalityLayout::text_visual_text(2, 4, 2);
        let x = tokens(&layout, 2);
        let diff = rotated
            .forward_float(&x, &layout)
            .unwrap()
            .max_abs_diff(&base.forward_float(&x, &layout).unwrap())
            .unwrap();
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn layer_norm_and_double_rotation_rejected() {
        let m = model();
        let r = RotationSet::hadamard(64).unwrap();
        assert!(matches!(rotate_vision(&m, &r), Err(Error::Precondition(_))));
        let once = rotate_llm(&m, &r).unwrap();
        assert!(matches!(rotate_llm(&once, &r), Err(Error::Precondition(_))));
        let bad = RotationSet {
            llm: Tensor::from_fn(64, 64, |_, _| 1.0),
            ..r
        };
        assert!(rotate_llm(&m, &bad).is_err());
    }
}
