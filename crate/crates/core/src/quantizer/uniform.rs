use super::params::{check_bits, grid_bounds, Granularity, QuantParams, QuantizedTensor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Running `[min, max]` of the values seen so far.
///
/// Merging is commutative and associative, so reductions over samples may be
/// split or reordered without changing the result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeTracker {
    min: f64,
    max: f64,
}

impl Default for RangeTracker {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl RangeTracker {
    pub fn observe(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn observe_all<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        for &v in values {
            self.observe(v);
        }
    }

    pub fn merge(self, other: RangeTracker) -> RangeTracker {
        RangeTracker {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min > self.max
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Scale and zero-point for this range; an empty or all-zero range gets `s = 1, z = 0`.
    pub fn scale_and_zero(&self, bits: u8, symmetric: bool) -> (f64, i32) {
        if self.is_empty() {
            return (1.0, 0);
        }
        let (q_min, q_max) = grid_bounds(bits, symmetric);
        if symmetric {
            let absmax = self.min.abs().max(self.max.abs());
            if absmax == 0.0 {
                return (1.0, 0);
            }
            (absmax / q_max as f64, 0)
        } else {
            // the grid always covers zero so that zero stays exactly representable
            let lo = self.min.min(0.0);
            let hi = self.max.max(0.0);
            if hi == lo {
                return (1.0, 0);
            }
            let s = (hi - lo) / (q_max - q_min) as f64;
            let z = ((q_min as f64) - lo / s).round() as i32;
            (s, z.clamp(q_min, q_max))
        }
    }
}

/// Min/max (or absmax) parameters for every slice of `x` at the given granularity.
pub fn compute_params_absmax(x: &Tensor, bits: u8, symmetric: bool, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::Empty(
            "cannot derive quantization parameters from an empty tensor",
        ));
    }
    if let Granularity::PerGroup(0) = granularity {
        return Err(Error::Config("group size must be positive".into()));
    }
    let slices = granularity.slice_count(x.rows(), x.cols());
    let mut ranges = vec![RangeTracker::default(); slices];
    for i in 0..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            ranges[granularity.slice_of(i, j, x.cols())].observe(v);
        }
    }
    let (scales, zero_points) = ranges.iter().map(|r| r.scale_and_zero(bits, symmetric)).unzip();
    QuantParams::new(bits, symmetric, granularity, scales, zero_points)
}

/// `clamp(round(x / s) + z, q_min, q_max)` with rounding half away from zero.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<QuantizedTensor> {
    p.check_shape(x.rows(), x.cols())?;
    let (q_min, q_max) = (p.q_min(), p.q_max());
    let g = p.granularity();
    let mut values = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            let k = g.slice_of(i, j, x.cols());
            values.push(quantize_value(v, p.scales()[k], p.zero_points()[k], q_min, q_max));
        }
    }
    QuantizedTensor::new(x.rows(), x.cols(), values, p.clone())
}

#[inline]
pub(crate) fn quantize_value(v: f64, scale: f64, zero: i32, q_min: i32, q_max: i32) -> i32 {
    let q = (v / scale).round() + zero as f64;
    q.clamp(q_min as f64, q_max as f64) as i32
}

/// `(q - z) * s`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let p = q.params();
    let g = p.granularity();
    Tensor::from_fn(q.rows(), q.cols(), |i, j| {
        let k = g.slice_of(i, j, q.cols());
        (q.get(i, j) - p.zero_points()[k]) as f64 * p.scales()[k]
    })
}

pub fn fake_quant(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, p)?))
}
