use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, RotationKind};
use super::exec::{ActMode, ActParams, CalibrationRecorder, ExecOptions, QuantizedExec, QuantizedLayer};
use super::samples::CalibSample;
use crate::aifs::{build_aifs_plan, ModalityLayout};
use crate::error::{Error, Result};
use crate::hadamard::{self, RotationSet};
use crate::model::{LinearKind, Part, SiteId, ToyMllm};
use crate::norm_rewrite::preln_to_rmsnorm;
use crate::numerics::Tensor;
use crate::quantizer::{quantize_weight_rtn, QuantParams, QuantizedTensor, ScaleOpCounter};
use crate::rms::{
    build_split_plan_with, compliance_ratio, pre_online_weight, ComplianceReport, RmsOptions, RmsSplitPlan,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const WEIGHT_SOLVER_NOTE: &str = "weights use symmetric round-to-nearest quantization \
     (per output channel, or per input group when configured) instead of a second-order solver";

/// Progress through the quantization recipe; each step requires the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Float,
    LlmRotated,
    LlmWeightsQuantized,
    LlmCalibrated,
    VisionRewritten,
    VisionRotated,
    VisionQuantized,
    RmsPlanned,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Float => "float model",
            Stage::LlmRotated => "language-model rotation",
            Stage::LlmWeightsQuantized => "language-model weight quantization",
            Stage::LlmCalibrated => "modality activation calibration",
            Stage::VisionRewritten => "vision LayerNorm rewrite",
            Stage::VisionRotated => "vision rotation",
            Stage::VisionQuantized => "vision calibration and weight quantization",
            Stage::RmsPlanned => "outlier split planning",
        }
    }
}

/// Calibrated activation parameters for every quantized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub samples: usize,
    pub sites: BTreeMap<SiteId, ActParams>,
}

impl CalibrationRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        check_schema(r.schema_version)?;
        Ok(r)
    }
}

fn check_schema(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Format(format!("schema version {v}, expected {SCHEMA_VERSION}")));
    }
    Ok(())
}

/// Where activation parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum CalibSource<'a> {
    Samples(&'a [CalibSample]),
    Record(&'a CalibrationRecord),
}

/// Staged quantization of a float model.
#[derive(Debug, Clone)]
pub struct MquantPipeline {
    config: PipelineConfig,
    reference: ToyMllm,
    model: ToyMllm,
    rotation: RotationSet,
    stage: Stage,
    weights: BTreeMap<SiteId, QuantizedTensor>,
    acts: BTreeMap<SiteId, ActParams>,
    rms: BTreeMap<SiteId, RmsSplitPlan>,
    calibration_samples: usize,
}

impl MquantPipeline {
    pub fn new(model: ToyMllm, mut config: PipelineConfig) -> Result<Self> {
        config.quant.validate()?;
        model.config.validate()?;
        if model.config != config.model {
            log::warn!("model file settings differ from the [model] table; using the model's");
            config.model = model.config.clone();
        }
        let (d, ff) = (model.config.d_model, model.config.d_ff());
        let rotation = match config.quant.rotation {
            RotationKind::Identity => RotationSet::identity(d),
            RotationKind::Hadamard => RotationSet::hadamard(d)?,
            RotationKind::Randomized => RotationSet::randomized(d, ff, config.quant.rotation_seed)?,
        };
        Ok(Self {
            config,
            reference: model.clone(),
            model,
            rotation,
            stage: Stage::Float,
            weights: BTreeMap::new(),
            acts: BTreeMap::new(),
            rms: BTreeMap::new(),
            calibration_samples: 0,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// The transformed float model at the current stage.
    pub fn model(&self) -> &ToyMllm {
        &self.model
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn require(&self, before: Stage, attempted: Stage) -> Result<()> {
        if self.stage != before {
            return Err(Error::StageOrder {
                expected: self.next_stage_name(),
                attempted: attempted.name(),
            });
        }
        Ok(())
    }

    fn next_stage_name(&self) -> &'static str {
        match self.stage {
            Stage::Float => Stage::LlmRotated.name(),
            Stage::LlmRotated => Stage::LlmWeightsQuantized.name(),
            Stage::LlmWeightsQuantized => Stage::LlmCalibrated.name(),
            Stage::LlmCalibrated => Stage::VisionRewritten.name(),
            Stage::VisionRewritten => Stage::VisionRotated.name(),
            Stage::VisionRotated => Stage::VisionQuantized.name(),
            Stage::VisionQuantized => Stage::RmsPlanned.name(),
            Stage::RmsPlanned => "finish",
        }
    }

    fn sites_of(&self, parts: &[Part]) -> Vec<SiteId> {
        self.model
            .sites()
            .into_iter()
            .filter(|s| parts.contains(&s.part))
            .collect()
    }

    fn quantize_weights(&mut self, parts: &[Part]) -> Result<()> {
        let q = &self.config.quant;
        for site in self.sites_of(parts) {
            let layer = self.model.linear(site).expect("site from model");
            self.weights
                .insert(site, quantize_weight_rtn(&layer.weight, q.bits_w, q.weight_group_size)?);
        }
        Ok(())
    }

    fn take_from_record(&mut self, record: &CalibrationRecord, parts: &[Part]) -> Result<()> {
        for site in self.sites_of(parts) {
            let act = record
                .sites
                .get(&site)
                .ok_or_else(|| Error::Format(format!("calibration record has no entry for {site}")))?;
            let bits = match act {
                ActParams::Static(p) => p.bits(),
                ActParams::Msq(p) => p.bits(),
            };
            if bits != self.config.quant.bits_a {
                return Err(Error::Config(format!(
                    "{site} was calibrated at {bits} bits, config asks for {}",
                    self.config.quant.bits_a
                )));
            }
            self.acts.insert(site, act.clone());
        }
        self.calibration_samples = record.samples;
        Ok(())
    }

    fn finish_recorder(&mut self, rec: &CalibrationRecorder, parts: &[Part]) -> Result<()> {
        let q = &self.config.quant;
        let mut found = rec.finish(q.bits_a, q.act_symmetric)?;
        for site in self.sites_of(parts) {
            let act = match found.remove(&site) {
                Some(a) => a,
                None => {
                    log::warn!("{site} saw no calibration tokens; using unit scale");
                    ActParams::Static(QuantParams::per_tensor(q.bits_a, q.act_symmetric, 1.0, 0)?)
                }
            };
            self.acts.insert(site, act);
        }
        Ok(())
    }

    /// Stage 1.
    pub fn rotate_llm(&mut self) -> Result<()> {
        self.require(Stage::Float, Stage::LlmRotated)?;
        self.model = hadamard::rotate_llm(&self.model, &self.rotation)?;
        self.stage = Stage::LlmRotated;
        Ok(())
    }

    /// Stage 2.
    pub fn quantize_llm_weights(&mut self) -> Result<()> {
        self.require(Stage::LlmRotated, Stage::LlmWeightsQuantized)?;
        self.quantize_weights(&[Part::Llm])?;
        self.stage = Stage::LlmWeightsQuantized;
        Ok(())
    }

    /// Stage 3: modality parameters for every language-model layer, measured on
    /// the float vision path and the rotated language model.
    pub fn calibrate_llm(&mut self, source: CalibSource<'_>) -> Result<()> {
        self.require(Stage::LlmWeightsQuantized, Stage::LlmCalibrated)?;
        match source {
            CalibSource::Record(r) => self.take_from_record(r, &[Part::Llm])?,
            CalibSource::Samples(samples) => {
                if samples.is_empty() {
                    return Err(Error::Empty("calibration needs at least one sample"));
                }
                let mut rec = CalibrationRecorder::new(&[Part::Llm]);
                for s in samples {
                    build_aifs_plan(&s.layout)?;
                    self.model
                        .forward(&s.tokens, &s.layout, self.config.quant.aifs, &mut rec)?;
                }
                self.finish_recorder(&rec, &[Part::Llm])?;
                let ActParams::Msq(_) = self.acts[&SiteId::llm(0, LinearKind::Qkv)] else {
                    return Err(Error::Precondition(
                        "language-model calibration produced no modality parameters".into(),
                    ));
                };
                self.calibration_samples = samples.len();
            }
        }
        self.stage = Stage::LlmCalibrated;
        Ok(())
    }

    /// Stage 4.
    pub fn rewrite_vision(&mut self) -> Result<()> {
        self.require(Stage::LlmCalibrated, Stage::VisionRewritten)?;
        self.model = preln_to_rmsnorm(&self.model)?;
        self.stage = Stage::VisionRewritten;
        Ok(())
    }

    /// Stage 5.
    pub fn rotate_vision(&mut self) -> Result<()> {
        self.require(Stage::VisionRewritten, Stage::VisionRotated)?;
        self.model = hadamard::rotate_vision(&self.model, &self.rotation)?;
        self.stage = Stage::VisionRotated;
        Ok(())
    }

    /// Stage 6: static per-tensor parameters and weights for the vision tower and projector.
    pub fn calibrate_vision(&mut self, source: CalibSource<'_>) -> Result<()> {
        self.require(Stage::VisionRotated, Stage::VisionQuantized)?;
        let parts = [Part::Vision, Part::Projector];
        match source {
            CalibSource::Record(r) => self.take_from_record(r, &parts)?,
            CalibSource::Samples(samples) => {
                if samples.is_empty() {
                    return Err(Error::Empty("calibration needs at least one sample"));
                }
                let mut rec = CalibrationRecorder::new(&parts);
                for s in samples {
                    for seg in s.layout.visual_segments() {
                        self.model
                            .encode_visual(&s.tokens.slice_rows(seg.start, seg.end)?, &mut rec)?;
                    }
                }
                self.finish_recorder(&rec, &parts)?;
            }
        }
        self.quantize_weights(&parts)?;
        self.stage = Stage::VisionQuantized;
        Ok(())
    }

    /// Stage 7: split plans for down projections whose input is transformed online.
    pub fn build_rms_plans(&mut self) -> Result<()> {
        self.require(Stage::VisionQuantized, Stage::RmsPlanned)?;
        let q = &self.config.quant;
        if q.rms_active() {
            let opts = RmsOptions {
                bits: q.bits_w,
                split_bits: q.split_row_bits,
                group: q.weight_group_size,
            };
            for site in self.model.sites() {
                if site.kind != LinearKind::Down {
                    continue;
                }
                let block = self.model.block(site.part, site.block).expect("site from model");
                if block.mlp.online_hadamard.is_none() {
                    continue;
                }
                let original = pre_online_weight(&block.mlp)?;
                let plan = build_split_plan_with(&site.to_string(), &block.mlp.down.weight, &original, &opts)?;
                log::info!(
                    "{site}: split {} ({} offending columns)",
                    if plan.triggered { "triggered" } else { "not triggered" },
                    plan.offending_columns.len()
                );
                self.rms.insert(site, plan);
            }
        } else if q.rms {
            log::warn!("randomized or identity rotation: the outlier split path is disabled");
        }
        self.stage = Stage::RmsPlanned;
        Ok(())
    }

    /// Activation parameters gathered so far.
    pub fn calibration_record(&self) -> Result<CalibrationRecord> {
        if self.stage < Stage::VisionQuantized {
            return Err(Error::StageOrder {
                expected: self.next_stage_name(),
                attempted: "export calibration",
            });
        }
        Ok(CalibrationRecord {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            samples: self.calibration_samples,
            sites: self.acts.clone(),
        })
    }

    pub fn finish(mut self) -> Result<QuantizedModel> {
        if self.stage != Stage::RmsPlanned {
            return Err(Error::StageOrder {
                expected: self.next_stage_name(),
                attempted: "finish",
            });
        }
        let mut layers = BTreeMap::new();
        for site in self.model.sites() {
            let weight = self.weights.remove(&site).expect("every site quantized");
            let act = self.acts.remove(&site).expect("every site calibrated");
            layers.insert(
                site,
                QuantizedLayer {
                    weight,
                    act,
                    rms: self.rms.remove(&site),
                },
            );
        }
        Ok(QuantizedModel {
            schema_version: SCHEMA_VERSION,
            compliance: compliance_ratio(&self.reference)?,
            config: self.config,
            weight_solver: WEIGHT_SOLVER_NOTE.to_string(),
            calibration_samples: self.calibration_samples,
            reference: self.reference,
            model: self.model,
            rotation: self.rotation,
            layers,
        })
    }

    /// Every stage in order.
    pub fn run(model: ToyMllm, source: CalibSource<'_>, config: PipelineConfig) -> Result<QuantizedModel> {
        let mut p = Self::new(model, config)?;
        p.rotate_llm()?;
        p.quantize_llm_weights()?;
        p.calibrate_llm(source)?;
        p.rewrite_vision()?;
        p.rotate_vision()?;
        p.calibrate_vision(source)?;
        p.build_rms_plans()?;
        p.finish()
    }
}

/// Runs the full recipe on calibration samples.
pub fn mquant_quantize(model: &ToyMllm, calib: &[CalibSample], config: &PipelineConfig) -> Result<QuantizedModel> {
    MquantPipeline::run(model.clone(), CalibSource::Samples(calib), config.clone())
}

/// The quantized model plus the float reference it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub weight_solver: String,
    pub calibration_samples: usize,
    pub compliance: ComplianceReport,
    /// Untransformed float model.
    pub reference: ToyMllm,
    /// Rewritten and rotated float model supplying norms, biases and embeddings.
    pub model: ToyMllm,
    pub rotation: RotationSet,
    pub layers: BTreeMap<SiteId, QuantizedLayer>,
}

impl QuantizedModel {
    pub fn default_options(&self) -> ExecOptions {
        ExecOptions {
            act_mode: ActMode::StaticMsq,
            aifs: self.config.quant.aifs,
            rms: self.config.quant.rms_active(),
            passthrough: false,
        }
    }

    /// Number of quantized language-model layers.
    pub fn llm_layer_count(&self) -> usize {
        self.layers.keys().filter(|s| s.part == Part::Llm).count()
    }

    /// Quantized forward; the counter covers language-model activation scales.
    pub fn forward(&self, x: &Tensor, layout: &ModalityLayout, opts: &ExecOptions) -> Result<(Tensor, ScaleOpCounter)> {
        let q = &self.config.quant;
        let mut exec = QuantizedExec::new(&self.layers, *opts, q.bits_a, q.act_symmetric);
        let y = self.model.forward(x, layout, opts.aifs, &mut exec)?;
        Ok((y, exec.counter))
    }

    pub fn reference_forward(&self, x: &Tensor, layout: &ModalityLayout) -> Result<Tensor> {
        self.reference.forward_float(x, layout)
    }

    pub fn split_plans(&self) -> impl Iterator<Item = (&SiteId, &RmsSplitPlan)> {
        self.layers.iter().filter_map(|(s, l)| l.rms.as_ref().map(|p| (s, p)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        check_schema(m.schema_version)?;
        Ok(m)
    }
}
