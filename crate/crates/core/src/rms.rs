//! Detection and splitting of the first-row weight outlier created by the
//! Walsh–Hadamard transform.
//!
//! Row 0 of `H·W` equals `√n · column_means(W)`. When that exceeds the largest
//! entry of a column, the rotated weight gains a new outlier. The split path
//! zeroes row 0 in the main weight and evaluates it as a separate rank-one
//! product with its own scale.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hadamard::fht_columns;
use crate::model::{Mlp, Part, ToyMllm};
use crate::numerics::{matmul, Tensor};
use crate::quantizer::{
    check_bits, compute_params_absmax, dequantize, dequantize_weight, fake_quant, quantize, quantize_weight_rtn,
    Granularity, QuantParams, QuantizedTensor,
};

/// Columns `j` with `√n · mean(w[:, j]) > max_i w[i, j]`.
pub fn detect_outliers(w: &Tensor) -> Vec<usize> {
    let root_n = (w.rows() as f64).sqrt();
    (0..w.cols())
        .filter(|&j| {
            let col = w.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            root_n * mean > max
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmsOptions {
    pub bits: u8,
    /// Bit-width of the split row; defaults to `bits`.
    pub split_bits: Option<u8>,
    /// Group size for the main weight; per output channel when `None`.
    pub group: Option<usize>,
}

impl RmsOptions {
    pub fn new(bits: u8) -> Self {
        Self {
            bits,
            split_bits: None,
            group: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsSplitPlan {
    pub layer_id: String,
    pub triggered: bool,
    pub offending_columns: Vec<usize>,
    /// Row 0 of the rotated weight when triggered, zeros otherwise.
    pub split_row: Vec<f64>,
    pub split_row_params: QuantParams,
    /// Rotated weight with row 0 zeroed when triggered.
    pub main_weight: Tensor,
    pub main_quant: QuantizedTensor,
    pub split_quant: QuantizedTensor,
}

pub fn build_split_plan(layer_id: &str, w_rotated: &Tensor, w_original: &Tensor, bits: u8) -> Result<RmsSplitPlan> {
    build_split_plan_with(layer_id, w_rotated, w_original, &RmsOptions::new(bits))
}

/// Checks `w_rotated = H · w_original`, then splits row 0 if any column meets the trigger.
pub fn build_split_plan_with(
    layer_id: &str,
    w_rotated: &Tensor,
    w_original: &Tensor,
    opts: &RmsOptions,
) -> Result<RmsSplitPlan> {
    check_bits(opts.bits)?;
    let split_bits = opts.split_bits.unwrap_or(opts.bits);
    check_bits(split_bits)?;
    if w_rotated.shape() != w_original.shape() {
        return shape_err(format!(
            "rotated weight {:?} vs original {:?}",
            w_rotated.shape(),
            w_original.shape()
        ));
    }
    let expected = fht_columns(w_original)?;
    let tol = 1e-8 * expected.max_abs().max(1.0);
    if expected.max_abs_diff(w_rotated)? > tol {
        return Err(Error::Precondition(format!(
            "{layer_id}: weight is not the Hadamard rotation of the original"
        )));
    }
    let offending_columns = detect_outliers(w_original);
    let triggered = !offending_columns.is_empty();
    let mut main_weight = w_rotated.clone();
    let split_row = if triggered {
        let row = w_rotated.row(0).to_vec();
        main_weight.row_mut(0).fill(0.0);
        row
    } else {
        vec![0.0; w_rotated.cols()]
    };
    let split_t = Tensor::row_vector(&split_row)?;
    let split_row_params = compute_params_absmax(&split_t, split_bits, true, Granularity::PerTensor)?;
    Ok(RmsSplitPlan {
        layer_id: layer_id.to_string(),
        triggered,
        offending_columns,
        main_quant: quantize_weight_rtn(&main_weight, opts.bits, opts.group)?,
        split_quant: quantize(&split_t, &split_row_params)?,
        split_row,
        split_row_params,
        main_weight,
    })
}

impl RmsSplitPlan {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.main_weight.rows() {
            return shape_err(format!(
                "{}: input has {} features, weight expects {}",
                self.layer_id,
                x.cols(),
                self.main_weight.rows()
            ));
        }
        Ok(())
    }

    fn add_split(&self, mut y: Tensor, x: &Tensor, row: &[f64]) -> Tensor {
        if self.triggered {
            for i in 0..y.rows() {
                let x0 = x.get(i, 0);
                y.row_mut(i).iter_mut().zip(row).for_each(|(v, r)| *v += x0 * r);
            }
        }
        y
    }

    /// Main GEMM plus the split GEMV on already quantized-and-dequantized inputs.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let y = matmul(x, &dequantize_weight(&self.main_quant))?;
        Ok(self.add_split(y, x, dequantize(&self.split_quant).data()))
    }

    /// Same split with unquantized weights.
    pub fn apply_float(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let y = matmul(x, &self.main_weight)?;
        Ok(self.add_split(y, x, &self.split_row))
    }

    /// Main weight with the split row put back.
    pub fn reconstruct(&self) -> Tensor {
        let mut w = self.main_weight.clone();
        if self.triggered {
            w.row_mut(0).copy_from_slice(&self.split_row);
        }
        w
    }
}

/// `fq(x)·fq(main) + fq(x)[:, 0] ⊗ fq(split_row)`.
pub fn rms_forward(x_rotated: &Tensor, plan: &RmsSplitPlan, a_params: &QuantParams) -> Result<Tensor> {
    plan.apply(&fake_quant(x_rotated, a_params)?)
}

pub fn rms_forward_float(x_rotated: &Tensor, plan: &RmsSplitPlan) -> Result<Tensor> {
    plan.apply_float(x_rotated)
}

/// Down-projection weight as seen before any online transform was absorbed.
pub fn pre_online_weight(mlp: &Mlp) -> Result<Tensor> {
    let w = &mlp.down.weight;
    match &mlp.online_hadamard {
        None => Ok(w.clone()),
        Some(t) => {
            let hw = fht_columns(w)?;
            Ok(match &t.signs {
                None => hw,
                Some(s) => Tensor::from_fn(hw.rows(), hw.cols(), |i, j| s[i] * hw.get(i, j)),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceRow {
    pub part: Part,
    pub blocks: usize,
    pub triggered: usize,
    pub ratio: f64,
}

/// Fraction of down projections per part with at least one triggering column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub rows: Vec<ComplianceRow>,
}

impl ComplianceReport {
    pub fn ratio(&self, part: Part) -> Option<f64> {
        self.rows.iter().find(|r| r.part == part).map(|r| r.ratio)
    }
}

pub fn compliance_ratio(model: &ToyMllm) -> Result<ComplianceReport> {
    let mut rows = Vec::with_capacity(2);
    for (part, blocks) in [(Part::Vision, &model.vision.blocks), (Part::Llm, &model.llm.blocks)] {
        let mut triggered = 0;
        for b in blocks {
            if !detect_outliers(&pre_online_weight(&b.mlp)?).is_empty() {
                triggered += 1;
            }
        }
        let ratio = if blocks.is_empty() {
            0.0
        } else {
            triggered as f64 / blocks.len() as f64
        };
        rows.push(ComplianceRow {
            part,
            blocks: blocks.len(),
            triggered,
            ratio,
        });
    }
    Ok(ComplianceReport { rows })
}
