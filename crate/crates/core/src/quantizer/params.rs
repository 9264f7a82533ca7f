use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Which slice of a tensor shares one scale/zero-point pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    /// One pair per row; used for activations, where rows are tokens.
    PerToken,
    /// One pair per row; used for weights stored output-channel-major.
    PerChannel,
    /// One pair per run of `g` consecutive columns within each row.
    PerGroup(usize),
}

impl Granularity {
    pub fn slice_count(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerToken | Granularity::PerChannel => rows,
            Granularity::PerGroup(g) => rows * cols.div_ceil(g),
        }
    }

    /// Index of the slice owning element `(i, j)`.
    #[inline]
    pub fn slice_of(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerToken | Granularity::PerChannel => i,
            Granularity::PerGroup(g) => i * cols.div_ceil(g) + j / g,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerToken => "per_token",
            Granularity::PerChannel => "per_channel",
            Granularity::PerGroup(_) => "per_group",
        }
    }
}

pub const SUPPORTED_BITS: [u8; 3] = [4, 8, 16];

pub fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bit-width {bits} not supported (expected 4, 8 or 16)"
        )))
    }
}

/// Integer grid `[q_min, q_max]` for a bit-width.
///
/// Symmetric grids are restricted to `±(2^(b-1) - 1)`; asymmetric grids are
/// unsigned `[0, 2^b - 1]`.
pub fn grid_bounds(bits: u8, symmetric: bool) -> (i32, i32) {
    if symmetric {
        let q = (1i32 << (bits - 1)) - 1;
        (-q, q)
    } else {
        (0, (1i32 << bits) - 1)
    }
}

/// Scale/zero-point set of a uniform affine quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRecord", into = "ParamsRecord")]
pub struct QuantParams {
    bits: u8,
    symmetric: bool,
    granularity: Granularity,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
}

impl QuantParams {
    pub fn new(
        bits: u8,
        symmetric: bool,
        granularity: Granularity,
        scales: Vec<f64>,
        zero_points: Vec<i32>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if let Granularity::PerGroup(0) = granularity {
            return Err(Error::Config("group size must be positive".into()));
        }
        if scales.is_empty() || scales.len() != zero_points.len() {
            return shape_err(format!(
                "{} scales with {} zero points",
                scales.len(),
                zero_points.len()
            ));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("scale {s} is not a positive finite value")));
        }
        let (lo, hi) = grid_bounds(bits, symmetric);
        if symmetric && zero_points.iter().any(|&z| z != 0) {
            return Err(Error::Config("symmetric quantization requires zero points of 0".into()));
        }
        if zero_points.iter().any(|&z| z < lo || z > hi) {
            return Err(Error::Config(format!("zero point outside [{lo}, {hi}]")));
        }
        Ok(Self {
            bits,
            symmetric,
            granularity,
            scales,
            zero_points,
        })
    }

    pub fn per_tensor(bits: u8, symmetric: bool, scale: f64, zero_point: i32) -> Result<Self> {
        Self::new(bits, symmetric, Granularity::PerTensor, vec![scale], vec![zero_point])
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn q_min(&self) -> i32 {
        grid_bounds(self.bits, self.symmetric).0
    }

    pub fn q_max(&self) -> i32 {
        grid_bounds(self.bits, self.symmetric).1
    }

    /// Fails unless the parameter count fits a `rows x cols` tensor.
    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        let want = self.granularity.slice_count(rows, cols);
        if self.scales.len() != want {
            return shape_err(format!(
                "{:?} params hold {} scales, a {rows}x{cols} tensor needs {want}",
                self.granularity,
                self.scales.len()
            ));
        }
        Ok(())
    }
}

/// Flat serialized form: `{bits, symmetric, granularity, group_size?, scales, zero_points}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRecord {
    bits: u8,
    symmetric: bool,
    granularity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_size: Option<usize>,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
}

impl From<QuantParams> for ParamsRecord {
    fn from(p: QuantParams) -> Self {
        let group_size = match p.granularity {
            Granularity::PerGroup(g) => Some(g),
            _ => None,
        };
        ParamsRecord {
            bits: p.bits,
            symmetric: p.symmetric,
            granularity: p.granularity.name().to_string(),
            group_size,
            scales: p.scales,
            zero_points: p.zero_points,
        }
    }
}

impl TryFrom<ParamsRecord> for QuantParams {
    type Error = Error;

    fn try_from(r: ParamsRecord) -> Result<Self> {
        let granularity = match (r.granularity.as_str(), r.group_size) {
            ("per_tensor", None) => Granularity::PerTensor,
            ("per_token", None) => Granularity::PerToken,
            ("per_channel", None) => Granularity::PerChannel,
            ("per_group", Some(g)) => Granularity::PerGroup(g),
            (name, g) => {
                return Err(Error::Format(format!(
                    "unknown granularity {name:?} with group_size {g:?}"
                )))
            }
        };
        QuantParams::new(r.bits, r.symmetric, granularity, r.scales, r.zero_points)
    }
}

/// Integer codes plus the parameters that map them back to reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    values: Vec<i32>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(rows: usize, cols: usize, values: Vec<i32>, params: QuantParams) -> Result<Self> {
        if values.len() != rows * cols {
            return shape_err(format!("{} codes for {rows}x{cols}", values.len()));
        }
        params.check_shape(rows, cols)?;
        let (lo, hi) = (params.q_min(), params.q_max());
        if values.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::Format(format!("code outside [{lo}, {hi}]")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            params,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.values[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_bounds_by_bits() {
        assert_eq!(grid_bounds(8, true), (-127, 127));
        assert_eq!(grid_bounds(4, true), (-7, 7));
        assert_eq!(grid_bounds(8, false), (0, 255));
        assert_eq!(grid_bounds(16, false), (0, 65535));
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(QuantParams::per_tensor(3, true, 1.0, 0).is_err());
        assert!(QuantParams::per_tensor(8, true, 0.0, 0).is_err());
        assert!(QuantParams::per_tensor(8, true, 1.0, 3).is_err());
        assert!(QuantParams::per_tensor(8, false, 1.0, 256).is_err());
        assert!(QuantParams::new(8, true, Granularity::PerGroup(0), vec![1.0], vec![0]).is_err());
    }

    #[test]
    fn group_slices() {
        let g = Granularity::PerGroup(3);
        assert_eq!(g.slice_count(2, 7), 6);
        assert_eq!(g.slice_of(1, 6, 7), 5);
        assert_eq!(g.slice_of(0, 2, 7), 0);
    }

    #[test]
    fn serialized_record_shape() {
        let p = QuantParams::new(4, true, Granularity::PerGroup(2), vec![0.5, 0.25], vec![0, 0]).unwrap();
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["granularity"], "per_group");
        assert_eq!(json["group_size"], 2);
        let back: QuantParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);

        let pt = QuantParams::per_tensor(8, false, 0.1, 12).unwrap();
        let json = serde_json::to_value(&pt).unwrap();
        assert!(json.get("group_size").is_none());
        let bad = r#"{"bits":8,"symmetric":true,"granularity":"per_row","scales":[1.0],"zero_points":[0]}"#;
        assert!(serde_json::from_str::<QuantParams>(bad).is_err());
    }
}
