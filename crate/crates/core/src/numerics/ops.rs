use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Finite stand-in for `-inf` in additive attention masks.
///
/// `exp(MASKED - max)` underflows to exactly zero, and `MASKED - MASKED` stays finite.
pub const MASKED: f64 = f64::MIN / 2.0;

/// Affine parameters shared by LayerNorm and RMSNorm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    /// Per-feature gain.
    pub alpha: Vec<f64>,
    /// Per-feature offset; ignored by RMSNorm.
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl NormParams {
    pub fn unit(dim: usize, eps: f64) -> Self {
        Self {
            alpha: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.beta.len() {
            return shape_err(format!(
                "norm gain length {} vs offset length {}",
                self.alpha.len(),
                self.beta.len()
            ));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("norm eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn is_identity_affine(&self) -> bool {
        self.alpha.iter().all(|&a| a == 1.0) && self.beta.iter().all(|&b| b == 0.0)
    }
}

/// `a · b` with a fixed left-to-right accumulation order over the inner dimension.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return shape_err(format!("matmul of {:?} by {:?}", a.shape(), b.shape()));
    }
    let (n, inner, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    let bd = b.data();
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        // i-k-j order keeps each output entry's sum ordered by k
        for (k, &aik) in arow.iter().enumerate().take(inner) {
            let brow = &bd[k * m..(k + 1) * m];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(out)
}

/// Row-wise softmax of `scores + mask`, stabilised by subtracting the row maximum.
pub fn masked_softmax_rows(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if scores.shape() != mask.shape() {
        return shape_err(format!("scores {:?} vs mask {:?}", scores.shape(), mask.shape()));
    }
    let mut out = Tensor::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let s = scores.row(i);
        let m = mask.row(i);
        if m.iter().all(|&v| v <= MASKED) {
            return Err(Error::FullyMaskedRow(i));
        }
        let logits: Vec<f64> = s.iter().zip(m).map(|(a, b)| a + b).collect();
        let max = logits
            .iter()
            .zip(m)
            .filter(|(_, &mv)| mv > MASKED)
            .fold(f64::NEG_INFINITY, |acc, (&l, _)| acc.max(l));
        let row = out.row_mut(i);
        let mut sum = 0.0;
        for (o, (&l, &mv)) in row.iter_mut().zip(logits.iter().zip(m)) {
            *o = if mv > MASKED { (l - max).exp() } else { 0.0 };
            sum += *o;
        }
        for o in row.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

fn check_norm(x: &Tensor, p: &NormParams) -> Result<()> {
    p.validate()?;
    if x.cols() != p.dim() {
        return shape_err(format!(
            "norm over {} features applied to {} columns",
            p.dim(),
            x.cols()
        ));
    }
    Ok(())
}

/// `(x - mean) / sqrt(|x|^2/d - mean^2 + eps) * alpha + beta`, per row.
pub fn layer_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    check_norm(x, p)?;
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let var = (ms - mean * mean).max(0.0);
        let denom = (var + p.eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / denom * p.alpha[j] + p.beta[j];
        }
    }
    Ok(out)
}

/// `x / sqrt(|x|^2/d + eps) * alpha`, per row. No recentering; `beta` is ignored.
pub fn rms_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    check_norm(x, p)?;
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let denom = (ms + p.eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v / denom * p.alpha[j];
        }
    }
    Ok(out)
}

pub fn frobenius_norm(w: &Tensor) -> f64 {
    w.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn row_means(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().sum::<f64>() / x.cols() as f64)
        .collect()
}

pub fn column_means(x: &Tensor) -> Vec<f64> {
    let mut sums = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (s, v) in sums.iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    sums.iter().map(|s| s / x.rows() as f64).collect()
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?;
    if diff.is_empty() {
        return Err(Error::Empty("mse of empty tensors"));
    }
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// Cosine similarity of the flattened tensors. Two all-zero tensors compare as 1.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("cosine of {:?} and {:?}", a.shape(), b.shape()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = frobenius_norm(a);
    let nb = frobenius_norm(b);
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}
