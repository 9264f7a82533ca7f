use serde::{Deserialize, Serialize};

use super::exec::{Exec, LinearKind, Part, RowContext, SiteId};
use crate::aifs::{multi_head_attention, Rope};
use crate::error::{shape_err, Error, Result};
use crate::hadamard::fht_rows;
use crate::numerics::{gelu, layer_norm, matmul, rms_norm, silu, NormParams, Tensor};

/// `y = x · W + b` with `W` stored `d_in x d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return shape_err(format!("bias of length {} for {} outputs", bias.len(), weight.cols()));
        }
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        matmul(x, &self.weight)?.add_row_vector(&self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub kind: NormKind,
    pub params: NormParams,
}

impl Norm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            NormKind::LayerNorm => layer_norm(x, &self.params),
            NormKind::RmsNorm => rms_norm(x, &self.params),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => x.map(gelu),
            Activation::Silu => x.map(silu),
        }
    }
}

/// Online transform `x ← (x ⊙ s) · H` on the input of a down projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineHadamard {
    /// Random ±1 diagonal; `None` is the plain Walsh–Hadamard transform.
    pub signs: Option<Vec<f64>>,
}

impl OnlineHadamard {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match &self.signs {
            None => fht_rows(x),
            Some(s) => {
                if s.len() != x.cols() {
                    return shape_err(format!("{} signs for {} features", s.len(), x.cols()));
                }
                let mut y = x.clone();
                for i in 0..y.rows() {
                    y.row_mut(i).iter_mut().zip(s).for_each(|(v, si)| *v *= si);
                }
                fht_rows(&y)
            }
        }
    }
}

/// Multi-head self-attention with a fused query/key/value projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub rope: Option<Rope>,
}

impl Attention {
    pub fn new(qkv: Linear, out: Linear, n_heads: usize, rope: Option<Rope>) -> Result<Self> {
        let d = qkv.d_in();
        if qkv.d_out() != 3 * d || out.d_in() != d || out.d_out() != d {
            return shape_err(format!(
                "attention projections {:?} and {:?} for width {d}",
                qkv.weight.shape(),
                out.weight.shape()
            ));
        }
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
        }
        Ok(Self {
            qkv,
            out,
            n_heads,
            rope,
        })
    }

    /// `mask` is additive and `positions` drives the rotary embedding, if any.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        part: Part,
        block: usize,
        x: &Tensor,
        mask: &Tensor,
        positions: &[usize],
        rows: RowContext<'_>,
        exec: &mut dyn Exec,
    ) -> Result<Tensor> {
        let site = |kind| SiteId { part, block, kind };
        let qkv = exec.linear(site(LinearKind::Qkv), x, &self.qkv, rows)?;
        let d = self.qkv.d_in();
        let mut q = qkv.slice_cols(0, d)?;
        let mut k = qkv.slice_cols(d, 2 * d)?;
        let v = qkv.slice_cols(2 * d, 3 * d)?;
        if let Some(rope) = &self.rope {
            q = rope.apply(&q, positions)?;
            k = rope.apply(&k, positions)?;
        }
        let ctx = multi_head_attention(&q, &k, &v, self.n_heads, mask)?;
        exec.linear(site(LinearKind::Out), &ctx, &self.out, rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
    pub online_hadamard: Option<OnlineHadamard>,
}

impl Mlp {
    pub fn forward(
        &self,
        part: Part,
        block: usize,
        x: &Tensor,
        rows: RowContext<'_>,
        exec: &mut dyn Exec,
    ) -> Result<Tensor> {
        let site = |kind| SiteId { part, block, kind };
        let h = self
            .activation
            .apply(&exec.linear(site(LinearKind::Up), x, &self.up, rows)?);
        let h = match &self.online_hadamard {
            Some(t) => t.apply(&h)?,
            None => h,
        };
        exec.linear(site(LinearKind::Down), &h, &self.down, rows)
    }
}

/// Pre-norm residual block: `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn norms(&self) -> [&Norm; 2] {
        [&self.norm1, &self.norm2]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        part: Part,
        block: usize,
        x: &Tensor,
        mask: &Tensor,
        positions: &[usize],
        rows: RowContext<'_>,
        exec: &mut dyn Exec,
    ) -> Result<Tensor> {
        exec.observe_norm_input(part, 2 * block, x);
        let h = self.norm1.forward(x)?;
        let x = x.add(&self.attn.forward(part, block, &h, mask, positions, rows, exec)?)?;
        exec.observe_norm_input(part, 2 * block + 1, &x);
        let h = self.norm2.forward(&x)?;
        x.add(&self.mlp.forward(part, block, &h, rows, exec)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aifs::Modality;
    use crate::hadamard::{fht_columns, walsh_hadamard};
    use crate::model::FloatExec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_by_hand() {
        let l = Linear::new(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, -1.0],
        )
        .unwrap();
        let y = l.forward(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.5, 2.0]);
        assert!(Linear::new(Tensor::zeros(2, 2), vec![0.0]).is_err());
    }

    #[test]
    fn online_hadamard_absorbed_by_weight_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
        let signs: Vec<f64> = (0..8).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let t = OnlineHadamard {
            signs: Some(signs.clone()),
        };
        let dw = Tensor::from_fn(8, 4, |i, j| signs[i] * w.get(i, j));
        let absorbed = fht_columns(&dw).unwrap();
        let y = matmul(&t.apply(&x).unwrap(), &absorbed).unwrap();
        assert!(y.max_abs_diff(&matmul(&x, &w).unwrap()).unwrap() < 1e-12);
        let plain = OnlineHadamard { signs: None }.apply(&x).unwrap();
        let dense = matmul(&x, &walsh_hadamard(8).unwrap()).unwrap();
        assert!(plain.max_abs_diff(&dense).unwrap() < 1e-12);
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let qkv = Linear::new(Tensor::zeros(4, 12), vec![0.0; 12]).unwrap();
        let out = Linear::new(Tensor::zeros(4, 4), vec![0.0; 4]).unwrap();
        assert!(Attention::new(qkv.clone(), out.clone(), 3, None).is_err());
        assert!(Attention::new(out.clone(), out.clone(), 2, None).is_err());
        let a = Attention::new(qkv, out, 2, None).unwrap();
        // zero weights: attention contributes the bias only
        let x = Tensor::from_fn(3, 4, |i, j| (i + j) as f64);
        let tags = vec![Modality::Text; 3];
        let rows = RowContext {
            modalities: &tags,
            plan: None,
        };
        let y = a
            .forward(
                Part::Vision,
                0,
                &x,
                &Tensor::zeros(3, 3),
                &[0, 1, 2],
                rows,
                &mut FloatExec,
            )
            .unwrap();
        assert_eq!(y, Tensor::zeros(3, 4));
    }
}
