//! Uniform affine quantization at tensor, token, channel and group granularity.

mod calibrate;
mod params;
mod uniform;
mod weights;

pub use calibrate::{calibrate_static, quantize_per_token_dynamic, ScaleOpCounter};
pub use params::{check_bits, grid_bounds, Granularity, QuantParams, QuantizedTensor, SUPPORTED_BITS};
pub use uniform::{compute_params_absmax, dequantize, fake_quant, quantize, RangeTracker};
pub use weights::{dequantize_weight, int_matmul, quantize_weight_rtn};
