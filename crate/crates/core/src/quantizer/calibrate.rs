use serde::{Deserialize, Serialize};

use super::params::{check_bits, Granularity, QuantParams, QuantizedTensor};
use super::uniform::{quantize, RangeTracker};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-tensor static parameters from the running range over every sample.
///
/// No percentile clipping: every observed value stays inside the grid.
pub fn calibrate_static<'a>(
    samples: impl IntoIterator<Item = &'a Tensor>,
    bits: u8,
    symmetric: bool,
) -> Result<QuantParams> {
    check_bits(bits)?;
    let mut range = RangeTracker::default();
    let mut seen = 0usize;
    for s in samples {
        range.observe_all(s.data());
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Empty("static calibration needs at least one sample"));
    }
    let (s, z) = range.scale_and_zero(bits, symmetric);
    QuantParams::per_tensor(bits, symmetric, s, z)
}

/// Number of activation-scale applications performed, the runtime cost static scales remove.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleOpCounter {
    pub applications: u64,
}

impl ScaleOpCounter {
    pub fn add(&mut self, n: u64) {
        self.applications += n;
    }
}

/// Per-token dynamic quantization: one scale computed and applied per row at runtime.
pub fn quantize_per_token_dynamic(
    x: &Tensor,
    bits: u8,
    symmetric: bool,
    counter: &mut ScaleOpCounter,
) -> Result<QuantizedTensor> {
    let p = super::compute_params_absmax(x, bits, symmetric, Granularity::PerToken)?;
    counter.add(x.rows() as u64);
    quantize(x, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::compute_params_absmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-5.0..4.0))
    }

    #[test]
    fn single_sample_matches_direct_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 5, &mut rng);
        for sym in [true, false] {
            let direct = compute_params_absmax(&a, 8, sym, Granularity::PerTensor).unwrap();
            assert_eq!(calibrate_static([&a], 8, sym).unwrap(), direct);
        }
    }

    #[test]
    fn order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 5, &mut rng);
        let b = random(2, 5, &mut rng).scale(3.0);
        for sym in [true, false] {
            assert_eq!(
                calibrate_static([&a, &b], 4, sym).unwrap(),
                calibrate_static([&b, &a], 4, sym).unwrap()
            );
        }
    }

    #[test]
    fn matches_concatenation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Tensor> = (0..256).map(|_| random(2, 8, &mut rng)).collect();
        let concat = Tensor::concat_rows(&samples).unwrap();
        let absmax = concat.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let p = calibrate_static(&samples, 8, true).unwrap();
        assert_eq!(p.scales()[0], absmax / 127.0);
    }

    #[test]
    fn empty_sample_set_errors() {
        let none: Vec<Tensor> = Vec::new();
        assert!(matches!(calibrate_static(&none, 8, true), Err(Error::Empty(_))));
    }

    #[test]
    fn dynamic_counts_one_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(7, 4, &mut rng);
        let mut c = ScaleOpCounter::default();
        quantize_per_token_dynamic(&x, 8, true, &mut c).unwrap();
        assert_eq!(c.applications, 7);
    }
}
