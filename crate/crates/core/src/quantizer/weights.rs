//! Round-to-nearest weight quantization and an integer GEMM with 32-bit accumulators.
//!
//! Linear weights are stored `d_in x d_out` (`y = x · W`). Quantized weights are
//! kept output-channel-major (`d_out x d_in`) so that per-channel parameters are
//! per row and groups run along the input dimension.

use super::params::{Granularity, QuantParams, QuantizedTensor};
use super::uniform::{compute_params_absmax, dequantize, quantize};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Symmetric RTN per output channel, or per group of `group` input features.
pub fn quantize_weight_rtn(w: &Tensor, bits: u8, group: Option<usize>) -> Result<QuantizedTensor> {
    let out_major = w.transpose();
    let granularity = match group {
        Some(g) => Granularity::PerGroup(g),
        None => Granularity::PerChannel,
    };
    let p = compute_params_absmax(&out_major, bits, true, granularity)?;
    quantize(&out_major, &p)
}

/// Back to the `d_in x d_out` layout.
pub fn dequantize_weight(q: &QuantizedTensor) -> Tensor {
    dequantize(q).transpose()
}

/// `dequant(act) · dequant(weight)ᵀ` evaluated on integer codes.
///
/// `act` is `tokens x d_in` with per-tensor or per-token parameters; `weight` is
/// output-channel-major with per-tensor or per-channel parameters. Both must be at
/// most 8 bits so the dot products fit an `i32` accumulator.
pub fn int_matmul(act: &QuantizedTensor, weight: &QuantizedTensor) -> Result<Tensor> {
    if act.cols() != weight.cols() {
        return shape_err(format!(
            "int_matmul: activations have {} features, weights expect {}",
            act.cols(),
            weight.cols()
        ));
    }
    let (ap, wp) = (act.params(), weight.params());
    if ap.bits() > 8 || wp.bits() > 8 {
        return Err(Error::Config("integer GEMM supports at most 8-bit operands".into()));
    }
    let row_wise = |g: Granularity| {
        matches!(
            g,
            Granularity::PerTensor | Granularity::PerToken | Granularity::PerChannel
        )
    };
    if !row_wise(ap.granularity()) || !row_wise(wp.granularity()) {
        return Err(Error::Config("integer GEMM needs row-wise parameters".into()));
    }
    // |q - z| <= 255 on both sides
    if act.cols() > (i32::MAX as usize) / (255 * 255) {
        return Err(Error::Config("reduction dimension overflows an i32 accumulator".into()));
    }
    let slice = |p: &QuantParams, i: usize| if p.scales().len() == 1 { 0 } else { i };
    let (n, k, m) = (act.rows(), act.cols(), weight.rows());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let ai = slice(ap, i);
        let (sa, za) = (ap.scales()[ai], ap.zero_points()[ai]);
        let arow: Vec<i32> = (0..k).map(|c| act.get(i, c) - za).collect();
        for j in 0..m {
            let wj = slice(wp, j);
            let (sw, zw) = (wp.scales()[wj], wp.zero_points()[wj]);
            let mut acc: i32 = 0;
            for (c, &a) in arow.iter().enumerate() {
                acc += a * (weight.get(j, c) - zw);
            }
            out.set(i, j, sa * sw * acc as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rtn_per_channel_scales_follow_output_columns() {
        let w = random(16, 4, 1);
        let q = quantize_weight_rtn(&w, 4, None).unwrap();
        assert_eq!((q.rows(), q.cols()), (4, 16));
        for j in 0..4 {
            let absmax = w.column(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert_eq!(q.params().scales()[j], absmax / 7.0);
        }
        let back = dequantize_weight(&q);
        assert_eq!(back.shape(), w.shape());
        for i in 0..16 {
            for j in 0..4 {
                let s = q.params().scales()[j];
                assert!((back.get(i, j) - w.get(i, j)).abs() <= s / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn rtn_grouped() {
        let w = random(8, 3, 2);
        let q = quantize_weight_rtn(&w, 4, Some(4)).unwrap();
        assert_eq!(q.params().scales().len(), 3 * 2);
    }

    #[test]
    fn int_matmul_matches_dequantized_product() {
        let x = random(5, 32, 3).scale(4.0);
        let w = random(32, 6, 4);
        for sym in [true, false] {
            let pa = compute_params_absmax(&x, 8, sym, Granularity::PerToken).unwrap();
            let qa = quantize(&x, &pa).unwrap();
            let qw = quantize_weight_rtn(&w, 4, None).unwrap();
            let exact = int_matmul(&qa, &qw).unwrap();
            let float = matmul(&dequantize(&qa), &dequantize_weight(&qw)).unwrap();
            let tol = 1e-12 * float.max_abs().max(1.0);
            assert!(exact.max_abs_diff(&float).unwrap() <= tol);
        }
    }

    #[test]
    fn int_matmul_rejects_wide_operands() {
        let x = random(2, 4, 5);
        let pa = compute_params_absmax(&x, 16, true, Granularity::PerToken).unwrap();
        let qa = quantize(&x, &pa).unwrap();
        let qw = quantize_weight_rtn(&random(4, 2, 6), 8, None).unwrap();
        assert!(matches!(int_matmul(&qa, &qw), Err(Error::Config(_))));
    }
}
