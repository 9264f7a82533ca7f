use serde::{Deserialize, Serialize};

use super::layout::Modality;
use super::plan::AifsPlan;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::{check_bits, quantize, Granularity, QuantParams, QuantizedTensor, RangeTracker, ScaleOpCounter};

/// Static per-tensor activation parameters, one set per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsqParams {
    pub visual: QuantParams,
    pub text: QuantParams,
}

impl MsqParams {
    pub fn new(visual: QuantParams, text: QuantParams) -> Result<Self> {
        for p in [&visual, &text] {
            if p.granularity() != Granularity::PerTensor {
                return Err(Error::Config("modality parameters must be per-tensor".into()));
            }
        }
        if visual.bits() != text.bits() || visual.symmetric() != text.symmetric() {
            return Err(Error::Config(
                "visual and text parameters must share bit-width and symmetry".into(),
            ));
        }
        Ok(Self { visual, text })
    }

    pub fn bits(&self) -> u8 {
        self.visual.bits()
    }

    pub fn for_modality(&self, m: Modality) -> &QuantParams {
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        }
    }
}

/// Accumulates per-modality ranges; `merge` is order-independent.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MsqCalibrator {
    visual: RangeTracker,
    text: RangeTracker,
}

impl MsqCalibrator {
    pub fn observe(&mut self, x: &Tensor, modalities: &[Modality]) -> Result<()> {
        if modalities.len() != x.rows() {
            return shape_err(format!("{} modality tags for {} rows", modalities.len(), x.rows()));
        }
        for (i, m) in modalities.iter().enumerate() {
            match m {
                Modality::Visual => self.visual.observe_all(x.row(i)),
                Modality::Text => self.text.observe_all(x.row(i)),
            }
        }
        Ok(())
    }

    pub fn merge(self, other: MsqCalibrator) -> MsqCalibrator {
        MsqCalibrator {
            visual: self.visual.merge(other.visual),
            text: self.text.merge(other.text),
        }
    }

    /// A modality never observed falls back to `s = 1, z = 0` with a warning.
    pub fn finish(&self, bits: u8, symmetric: bool) -> Result<MsqParams> {
        check_bits(bits)?;
        let make = |r: &RangeTracker, name: &str| {
            if r.is_empty() {
                log::warn!("no {name} tokens seen during calibration; using unit scale");
            }
            let (s, z) = r.scale_and_zero(bits, symmetric);
            QuantParams::per_tensor(bits, symmetric, s, z)
        };
        MsqParams::new(make(&self.visual, "visual")?, make(&self.text, "text")?)
    }
}

/// Calibrates visual and text parameters over every sample's rows of that modality.
pub fn calibrate_msq<'a>(
    samples: impl IntoIterator<Item = (&'a Tensor, &'a [Modality])>,
    bits: u8,
    symmetric: bool,
) -> Result<MsqParams> {
    let mut cal = MsqCalibrator::default();
    let mut seen = 0usize;
    for (x, m) in samples {
        cal.observe(x, m)?;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Empty("modality calibration needs at least one sample"));
    }
    cal.finish(bits, symmetric)
}

fn quantize_by_row(
    x: &Tensor,
    row_modality: impl Fn(usize) -> Modality,
    p: &MsqParams,
    counter: &mut ScaleOpCounter,
) -> Result<QuantizedTensor> {
    let (scales, zeros): (Vec<f64>, Vec<i32>) = (0..x.rows())
        .map(|i| {
            let q = p.for_modality(row_modality(i));
            (q.scales()[0], q.zero_points()[0])
        })
        .unzip();
    let rows = QuantParams::new(p.bits(), p.visual.symmetric(), Granularity::PerToken, scales, zeros)?;
    // one static scale per modality segment, regardless of sequence length
    counter.add(2);
    quantize(x, &rows)
}

/// Quantizes a visual-first sequence: rows `[0, visual_count)` with the visual
/// parameters and the remainder with the text parameters.
pub fn quantize_msq(
    x_reordered: &Tensor,
    plan: &AifsPlan,
    p: &MsqParams,
    counter: &mut ScaleOpCounter,
) -> Result<QuantizedTensor> {
    if x_reordered.rows() != plan.len() {
        return shape_err(format!(
            "plan covers {} tokens, tensor has {} rows",
            plan.len(),
            x_reordered.rows()
        ));
    }
    let m = plan.visual_count;
    quantize_by_row(
        x_reordered,
        |i| if i < m { Modality::Visual } else { Modality::Text },
        p,
        counter,
    )
}

/// Same quantization for a sequence left in its original interleaved order.
pub fn quantize_msq_rows(
    x: &Tensor,
    modalities: &[Modality],
    p: &MsqParams,
    counter: &mut ScaleOpCounter,
) -> Result<QuantizedTensor> {
    if modalities.len() != x.rows() {
        return shape_err(format!("{} modality tags for {} rows", modalities.len(), x.rows()));
    }
    quantize_by_row(x, |i| modalities[i], p, counter)
}
