//! Rewrites the pre-LN vision tower into an equivalent RMSNorm-only tower.
//!
//! LayerNorm affines are folded into the linear that follows. The residual
//! stream is then kept zero-mean by recentering the output columns of every
//! layer that writes to it, and on zero-mean rows LayerNorm equals RMSNorm.

use crate::error::{Error, Result};
use crate::model::{Block, Linear, Norm, NormKind, ToyMllm};
use crate::numerics::{matmul, NormParams, Tensor};

/// `LN(x)·diag(α) + β` followed by `W, b` becomes unit-affine LN followed by
/// `diag(α)·W` and `b + β·W`.
pub fn fold_ln_affine(norm: &Norm, next: &Linear) -> Result<(Norm, Linear)> {
    if norm.kind != NormKind::LayerNorm {
        return Err(Error::Precondition("affine folding expects a LayerNorm".into()));
    }
    let p = &norm.params;
    p.validate()?;
    if next.d_in() != p.dim() {
        return Err(Error::Shape(format!(
            "norm width {} feeds a {}-input linear",
            p.dim(),
            next.d_in()
        )));
    }
    let shift = matmul(&Tensor::row_vector(&p.beta)?, &next.weight)?;
    let bias = next.bias.iter().zip(shift.data()).map(|(b, s)| b + s).collect();
    let weight = Tensor::from_fn(next.d_in(), next.d_out(), |i, j| p.alpha[i] * next.weight.get(i, j));
    Ok((
        Norm {
            kind: NormKind::LayerNorm,
            params: NormParams::unit(p.dim(), p.eps),
        },
        Linear { weight, bias },
    ))
}

/// Folds both LayerNorm affines of a block into its readers.
pub fn fold_block_ln_affine(block: &Block) -> Result<Block> {
    let mut b = block.clone();
    (b.norm1, b.attn.qkv) = fold_ln_affine(&block.norm1, &block.attn.qkv)?;
    (b.norm2, b.mlp.up) = fold_ln_affine(&block.norm2, &block.mlp.up)?;
    Ok(b)
}

/// `W ← W − rowmean(W)·1ᵀ`, `b ← b − mean(b)`: outputs become zero-mean per row.
fn recenter_outputs(l: &mut Linear) {
    let d = l.d_out() as f64;
    for i in 0..l.d_in() {
        let row = l.weight.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let mean = l.bias.iter().sum::<f64>() / d;
    l.bias.iter_mut().for_each(|v| *v -= mean);
}

fn to_rms(norm: &mut Norm) {
    norm.kind = NormKind::RmsNorm;
    norm.params = NormParams::unit(norm.params.dim(), norm.params.eps);
}

/// Replaces every vision LayerNorm by RMSNorm without changing the model's outputs.
///
/// A tower that is already RMSNorm-only is returned unchanged.
pub fn preln_to_rmsnorm(model: &ToyMllm) -> Result<ToyMllm> {
    let kinds: Vec<NormKind> = model
        .vision
        .blocks
        .iter()
        .flat_map(|b| b.norms())
        .chain(std::iter::once(&model.vision.final_norm))
        .map(|n| n.kind)
        .collect();
    if kinds.iter().all(|&k| k == NormKind::RmsNorm) {
        return Ok(model.clone());
    }
    if kinds.contains(&NormKind::RmsNorm) {
        return Err(Error::Precondition(
            "vision tower mixes LayerNorm and RMSNorm; expected a pre-LN tower".into(),
        ));
    }
    if model.vision.blocks.iter().any(|b| b.mlp.online_hadamard.is_some()) {
        return Err(Error::Precondition("vision tower is already rotated".into()));
    }

    let mut m = model.clone();
    recenter_outputs(&mut m.vision.embed);
    for b in &mut m.vision.blocks {
        *b = fold_block_ln_affine(b)?;
        recenter_outputs(&mut b.attn.out);
        recenter_outputs(&mut b.mlp.down);
        to_rms(&mut b.norm1);
        to_rms(&mut b.norm2);
    }
    let (final_norm, projector) = fold_ln_affine(&m.vision.final_norm, &m.projector)?;
    m.vision.final_norm = final_norm;
    m.projector = projector;
    to_rms(&mut m.vision.final_norm);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Exec, FloatExec, Part, RowContext, SiteId, ToyMllmConfig};
    use crate::numerics::{layer_norm, row_means};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
    }

    fn ln(alpha: Vec<f64>, beta: Vec<f64>) -> Norm {
        Norm {
            kind: NormKind::LayerNorm,
            params: NormParams { alpha, beta, eps: 1e-6 },
        }
    }

    #[test]
    fn unit_gain_leaves_weight_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(random(4, 3, -1.0, 1.0, &mut rng), vec![0.1, 0.2, 0.3]).unwrap();
        let (_, folded) = fold_ln_affine(&ln(vec![1.0; 4], vec![0.0; 4]), &l).unwrap();
        assert_eq!(folded, l);
    }

    #[test]
    fn folding_preserves_forward_and_shifts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alpha: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
        let norm = ln(alpha, beta.clone());
        let l = Linear::new(random(8, 5, -1.0, 1.0, &mut rng), vec![0.0; 5]).unwrap();
        let (n2, l2) = fold_ln_affine(&norm, &l).unwrap();
        let x = random(6, 8, -3.0, 3.0, &mut rng);
        let want = l.forward(&layer_norm(&x, &norm.params).unwrap()).unwrap();
        let got = l2.forward(&n2.forward(&x).unwrap()).unwrap();
        assert!(want.max_abs_diff(&got).unwrap() <= 1e-9);
        for j in 0..5 {
            let oracle: f64 = (0..8).map(|i| beta[i] * l.weight.get(i, j)).sum();
            assert!((l2.bias[j] - oracle).abs() < 1e-12);
        }
    }

    #[derive(Default)]
    struct NormInputs(Vec<f64>);

    impl Exec for NormInputs {
        fn linear(&mut self, s: SiteId, x: &Tensor, l: &Linear, r: RowContext<'_>) -> crate::Result<Tensor> {
            FloatExec.linear(s, x, l, r)
        }

        fn observe_norm_input(&mut self, part: Part, _: usize, x: &Tensor) {
            if part == Part::Vision {
                self.0.extend(row_means(x));
            }
        }
    }

    #[test]
    fn vision_encoder_equivalent_and_zero_mean() {
        let m = ToyMllm::init(ToyMllmConfig::default()).unwrap();
        let r = preln_to_rmsnorm(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = random(7, 64, -20.0, 10.0, &mut rng);
            let a = m.encode_visual(&x, &mut FloatExec).unwrap();
            let mut rec = NormInputs::default();
            let b = r.encode_visual(&x, &mut rec).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
            assert!(rec.0.iter().all(|v| v.abs() <= 1e-8));
        }
    }

    #[test]
    fn zero_mean_model_outputs_identical() {
        // every stream already zero-mean: recentering is a no-op on activations
        let mut m = ToyMllm::init(ToyMllmConfig::default()).unwrap();
        recenter_outputs(&mut m.vision.embed);
        for b in &mut m.vision.blocks {
            recenter_outputs(&mut b.attn.out);
            recenter_outputs(&mut b.mlp.down);
        }
        let r = preln_to_rmsnorm(&m).unwrap();
        let x = random(5, 64, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let a = m.encode_visual(&x, &mut FloatExec).unwrap();
        let b = r.encode_visual(&x, &mut FloatExec).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
    }

    #[test]
    fn idempotent_and_rejects_mixed() {
        let m = ToyMllm::init(ToyMllmConfig::default()).unwrap();
        let once = preln_to_rmsnorm(&m).unwrap();
        assert_eq!(preln_to_rmsnorm(&once).unwrap(), once);
        let mut mixed = m.clone();
        mixed.vision.blocks[0].norm1.kind = NormKind::RmsNorm;
        assert!(matches!(preln_to_rmsnorm(&mixed), Err(Error::Precondition(_))));
    }
}
