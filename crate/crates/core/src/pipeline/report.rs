use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::exec::{ActMode, ActParams, ExecOptions};
use super::quantize::{QuantizedModel, SCHEMA_VERSION};
use super::samples::{generate_synthetic_samples, CalibSample, LayoutSpec};
use crate::error::{Error, Result};
use crate::model::SiteId;
use crate::numerics::{cosine_similarity, mse};
use crate::quantizer::Granularity;
use crate::rms::ComplianceReport;

/// Longest sequence `bench` accepts.
pub const MAX_BENCH_LEN: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub tokens: usize,
    pub visual_tokens: usize,
    pub cosine: f64,
    pub mse: f64,
    pub scale_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub options: ExecOptions,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub mean_mse: f64,
    pub max_mse: f64,
    pub samples: Vec<SampleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub site: SiteId,
    pub weight_bits: u8,
    pub weight_granularity: String,
    pub act: ActParams,
    pub split_triggered: Option<bool>,
    pub offending_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub weight_solver: String,
    pub llm_layers: usize,
    pub layers: Vec<LayerSummary>,
    pub compliance: ComplianceReport,
    pub runs: Vec<RunReport>,
}

fn granularity_name(g: Granularity) -> String {
    match g {
        Granularity::PerTensor => "per_tensor".into(),
        Granularity::PerToken => "per_token".into(),
        Granularity::PerChannel => "per_channel".into(),
        Granularity::PerGroup(n) => format!("per_group({n})"),
    }
}

pub fn layer_summaries(qm: &QuantizedModel) -> Vec<LayerSummary> {
    qm.layers
        .iter()
        .map(|(site, l)| LayerSummary {
            site: *site,
            weight_bits: l.weight.params().bits(),
            weight_granularity: granularity_name(l.weight.params().granularity()),
            act: l.act.clone(),
            split_triggered: l.rms.as_ref().map(|p| p.triggered),
            offending_columns: l.rms.as_ref().map_or(0, |p| p.offending_columns.len()),
        })
        .collect()
}

/// Compares quantized outputs with the float reference on every sample.
pub fn run_samples(qm: &QuantizedModel, samples: &[CalibSample], opts: &ExecOptions) -> Result<RunReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation needs at least one sample"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let want = qm.reference_forward(&s.tokens, &s.layout)?;
        let (got, counter) = qm.forward(&s.tokens, &s.layout, opts)?;
        out.push(SampleMetrics {
            index,
            tokens: s.len(),
            visual_tokens: s.layout.visual_count(),
            cosine: cosine_similarity(&got, &want)?,
            mse: mse(&got, &want)?,
            scale_ops: counter.applications,
        });
    }
    let n = out.len() as f64;
    Ok(RunReport {
        options: *opts,
        mean_cosine: out.iter().map(|m| m.cosine).sum::<f64>() / n,
        min_cosine: out.iter().map(|m| m.cosine).fold(f64::INFINITY, f64::min),
        mean_mse: out.iter().map(|m| m.mse).sum::<f64>() / n,
        max_mse: out.iter().map(|m| m.mse).fold(0.0, f64::max),
        samples: out,
    })
}

/// One run per option set, plus layer and compliance summaries.
pub fn evaluate(qm: &QuantizedModel, samples: &[CalibSample], runs: &[ExecOptions]) -> Result<EvalReport> {
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        config: qm.config.clone(),
        weight_solver: qm.weight_solver.clone(),
        llm_layers: qm.llm_layer_count(),
        layers: layer_summaries(qm),
        compliance: qm.compliance.clone(),
        runs: runs
            .iter()
            .map(|o| run_samples(qm, samples, o))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub static_scale_ops: u64,
    pub dynamic_scale_ops: u64,
    pub static_ms: f64,
    pub dynamic_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub llm_layers: usize,
    pub rows: Vec<BenchRow>,
}

/// Scale-application counts and wall time for static modality scales against
/// per-token dynamic scales on one synthetic sequence per length.
pub fn bench(qm: &QuantizedModel, lengths: &[usize], seed: u64) -> Result<BenchReport> {
    let static_opts = qm.default_options();
    let dynamic_opts = ExecOptions {
        act_mode: ActMode::DynamicPerToken,
        ..static_opts
    };
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len == 0 || len > MAX_BENCH_LEN {
            return Err(Error::Config(format!("bench length {len} outside 1..={MAX_BENCH_LEN}")));
        }
        let s = generate_synthetic_samples(
            1,
            len,
            &LayoutSpec::balanced(len),
            qm.model.d_model(),
            seed ^ len as u64,
        )?
        .remove(0);
        let t = Instant::now();
        let (_, st) = qm.forward(&s.tokens, &s.layout, &static_opts)?;
        let static_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let (_, dy) = qm.forward(&s.tokens, &s.layout, &dynamic_opts)?;
        let dynamic_ms = t.elapsed().as_secs_f64() * 1e3;
        rows.push(BenchRow {
            len,
            static_scale_ops: st.applications,
            dynamic_scale_ops: dy.applications,
            static_ms,
            dynamic_ms,
        });
    }
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        llm_layers: qm.llm_layer_count(),
        rows,
    })
}
