use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aifs::{quantize_msq, quantize_msq_rows, MsqCalibrator, MsqParams};
use crate::error::{Error, Result};
use crate::model::{Exec, Linear, Part, RowContext, SiteId};
use crate::numerics::{matmul, Tensor};
use crate::quantizer::{
    dequantize, dequantize_weight, int_matmul, quantize, quantize_per_token_dynamic, Granularity, QuantParams,
    QuantizedTensor, RangeTracker, ScaleOpCounter,
};
use crate::rms::RmsSplitPlan;

/// Activation parameters of one linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActParams {
    /// One static per-tensor pair.
    Static(QuantParams),
    /// Static per-tensor pairs for visual and text rows.
    Msq(MsqParams),
}

/// Everything needed to run one linear layer quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    /// Round-to-nearest weight, output-channel-major.
    pub weight: QuantizedTensor,
    pub act: ActParams,
    pub rms: Option<RmsSplitPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// Calibrated modality scales on language-model layers.
    StaticMsq,
    /// Per-token scales computed at runtime on language-model layers.
    DynamicPerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOptions {
    pub act_mode: ActMode,
    pub aifs: bool,
    pub rms: bool,
    /// Skip every quantizer and run the transformed weights in float.
    pub passthrough: bool,
}

/// Records activation ranges at every linear input while computing in float.
#[derive(Debug, Default)]
pub struct CalibrationRecorder {
    parts: Vec<Part>,
    msq: BTreeMap<SiteId, MsqCalibrator>,
    ranges: BTreeMap<SiteId, RangeTracker>,
}

impl CalibrationRecorder {
    /// Language-model sites get modality-split ranges, others a single range.
    pub fn new(parts: &[Part]) -> Self {
        Self {
            parts: parts.to_vec(),
            ..Self::default()
        }
    }

    pub fn finish(&self, bits: u8, symmetric: bool) -> Result<BTreeMap<SiteId, ActParams>> {
        let mut out = BTreeMap::new();
        for (site, cal) in &self.msq {
            out.insert(*site, ActParams::Msq(cal.finish(bits, symmetric)?));
        }
        for (site, r) in &self.ranges {
            let (s, z) = r.scale_and_zero(bits, symmetric);
            out.insert(
                *site,
                ActParams::Static(QuantParams::per_tensor(bits, symmetric, s, z)?),
            );
        }
        Ok(out)
    }
}

impl Exec for CalibrationRecorder {
    fn linear(&mut self, site: SiteId, x: &Tensor, layer: &Linear, rows: RowContext<'_>) -> Result<Tensor> {
        if self.parts.contains(&site.part) {
            if site.part == Part::Llm {
                self.msq.entry(site).or_default().observe(x, rows.modalities)?;
            } else {
                self.ranges.entry(site).or_default().observe_all(x.data());
            }
        }
        layer.forward(x)
    }
}

/// Simulates the quantized model on top of the transformed float graph.
pub struct QuantizedExec<'a> {
    layers: &'a BTreeMap<SiteId, QuantizedLayer>,
    opts: ExecOptions,
    bits_a: u8,
    act_symmetric: bool,
    /// Activation-scale applications on language-model layers.
    pub counter: ScaleOpCounter,
}

impl<'a> QuantizedExec<'a> {
    pub fn new(
        layers: &'a BTreeMap<SiteId, QuantizedLayer>,
        opts: ExecOptions,
        bits_a: u8,
        act_symmetric: bool,
    ) -> Self {
        Self {
            layers,
            opts,
            bits_a,
            act_symmetric,
            counter: ScaleOpCounter::default(),
        }
    }

    fn quantize_input(
        &mut self,
        site: SiteId,
        x: &Tensor,
        act: &ActParams,
        rows: RowContext<'_>,
    ) -> Result<QuantizedTensor> {
        match (act, self.opts.act_mode) {
            (ActParams::Msq(_), ActMode::DynamicPerToken) => {
                quantize_per_token_dynamic(x, self.bits_a, self.act_symmetric, &mut self.counter)
            }
            (ActParams::Msq(p), ActMode::StaticMsq) => match rows.plan {
                Some(plan) => quantize_msq(x, plan, p, &mut self.counter),
                None => quantize_msq_rows(x, rows.modalities, p, &mut self.counter),
            },
            (ActParams::Static(p), _) if site.part != Part::Llm => quantize(x, p),
            (ActParams::Static(_), _) => Err(Error::Config(format!(
                "{site}: language-model layers need modality parameters"
            ))),
        }
    }
}

/// Integer GEMM when both operands are at most 8 bits with row-wise scales,
/// otherwise a float product of the dequantized operands.
pub fn quantized_matmul(x: &QuantizedTensor, w: &QuantizedTensor) -> Result<Tensor> {
    let int_ok = x.params().bits() <= 8
        && w.params().bits() <= 8
        && !matches!(w.params().granularity(), Granularity::PerGroup(_));
    if int_ok {
        int_matmul(x, w)
    } else {
        matmul(&dequantize(x), &dequantize_weight(w))
    }
}

impl Exec for QuantizedExec<'_> {
    fn linear(&mut self, site: SiteId, x: &Tensor, layer: &Linear, rows: RowContext<'_>) -> Result<Tensor> {
        if self.opts.passthrough {
            return layer.forward(x);
        }
        let layers = self.layers;
        let q = layers
            .get(&site)
            .ok_or_else(|| Error::Precondition(format!("no quantized weights for {site}")))?;
        let xq = self.quantize_input(site, x, &q.act, rows)?;
        let y = match &q.rms {
            Some(plan) if self.opts.rms && plan.triggered => plan.apply(&dequantize(&xq))?,
            _ => quantized_matmul(&xq, &q.weight)?,
        };
        y.add_row_vector(&layer.bias)
    }
}
