use serde::{Deserialize, Serialize};

use super::plan::AifsPlan;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

/// Rotary position embedding over adjacent feature pairs of each head.
///
/// Pair `p` of a token at position `t` is rotated by `t · base^(-2p / head_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rope {
    pub head_dim: usize,
    pub theta_base: f64,
}

impl Rope {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head dimension, got {head_dim}"
            )));
        }
        if theta_base.is_nan() || theta_base <= 0.0 {
            return Err(Error::Config(format!("theta base must be positive, got {theta_base}")));
        }
        Ok(Self { head_dim, theta_base })
    }

    fn frequency(&self, pair: usize) -> f64 {
        self.theta_base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }

    /// Rotates every head of every row; row `r` sits at position `positions[r]`.
    pub fn apply(&self, x: &Tensor, positions: &[usize]) -> Result<Tensor> {
        if positions.len() != x.rows() {
            return shape_err(format!("{} positions for {} rows", positions.len(), x.rows()));
        }
        if !x.cols().is_multiple_of(self.head_dim) {
            return shape_err(format!(
                "{} features is not a multiple of head dim {}",
                x.cols(),
                self.head_dim
            ));
        }
        let freqs: Vec<f64> = (0..self.head_dim / 2).map(|p| self.frequency(p)).collect();
        let mut out = x.clone();
        for (r, &pos) in positions.iter().enumerate() {
            let row = out.row_mut(r);
            for head in row.chunks_exact_mut(self.head_dim) {
                for (p, pair) in head.chunks_exact_mut(2).enumerate() {
                    let (sin, cos) = (pos as f64 * freqs[p]).sin_cos();
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = a * cos - b * sin;
                    pair[1] = a * sin + b * cos;
                }
            }
        }
        Ok(out)
    }
}

/// Applies rotary embeddings to reordered queries and keys using each token's original index.
pub fn remap_rope(plan: &AifsPlan, q: &Tensor, k: &Tensor, rope: &Rope) -> Result<(Tensor, Tensor)> {
    Ok((rope.apply(q, &plan.position_ids)?, rope.apply(k, &plan.position_ids)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aifs::{build_aifs_plan, Modality, ModalityLayout};
    use crate::numerics::matmul;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(matches!(Rope::new(5, DEFAULT_THETA_BASE), Err(Error::Config(_))));
    }

    #[test]
    fn position_zero_is_identity() {
        let rope = Rope::new(4, DEFAULT_THETA_BASE).unwrap();
        let x = random(3, 8, 1);
        let plan = build_aifs_plan(&ModalityLayout::text_visual_text(1, 2, 0)).unwrap();
        // original token 0 lands in slot 2
        let (q, _) = remap_rope(&plan, &x, &x, &rope).unwrap();
        assert_eq!(q.row(2), x.row(2));
    }

    #[test]
    fn identity_plan_is_standard_rope() {
        let rope = Rope::new(8, DEFAULT_THETA_BASE).unwrap();
        let x = random(5, 16, 2);
        let plan = build_aifs_plan(&ModalityLayout::all_text(5)).unwrap();
        let (q, k) = remap_rope(&plan, &x, &x, &rope).unwrap();
        let std = rope.apply(&x, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(q, std);
        assert_eq!(k, std);
    }

    #[test]
    fn explicit_rotation_matrix() {
        // one pair, head_dim 2: frequency 1, angle = position
        let rope = Rope::new(2, DEFAULT_THETA_BASE).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = rope.apply(&x, &[3]).unwrap();
        assert!((y.get(0, 0) - 3f64.cos()).abs() < 1e-15);
        assert!((y.get(0, 1) - 3f64.sin()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn reordered_scores_are_conjugated_naive_scores(bits in prop::collection::vec(any::<bool>(), 1..=12), seed in any::<u64>()) {
            let tags: Vec<Modality> = bits.iter().map(|&v| if v { Modality::Visual } else { Modality::Text }).collect();
            let layout = ModalityLayout::from_modalities(&tags);
            let plan = build_aifs_plan(&layout).unwrap();
            let n = tags.len();
            let rope = Rope::new(8, DEFAULT_THETA_BASE).unwrap();
            let q = random(n, 8, seed);
            let k = random(n, 8, seed.wrapping_add(1));
            let positions: Vec<usize> = (0..n).collect();
            let naive = matmul(&rope.apply(&q, &positions).unwrap(), &rope.apply(&k, &positions).unwrap().transpose()).unwrap();
            let (qr, kr) = remap_rope(&plan, &plan.reorder_rows(&q).unwrap(), &plan.reorder_rows(&k).unwrap(), &rope).unwrap();
            let reordered = matmul(&qr, &kr.transpose()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((reordered.get(i, j) - naive.get(plan.perm[i], plan.perm[j])).abs() <= 1e-8);
                }
            }
        }
    }
}
