//! End-to-end quantization of the toy model: staged transforms, calibration,
//! quantized execution and reporting.

mod config;
mod exec;
mod quantize;
mod report;
mod samples;

pub use config::{PipelineConfig, QuantConfig, RotationKind};
pub use exec::{quantized_matmul, ActMode, ActParams, CalibrationRecorder, ExecOptions, QuantizedExec, QuantizedLayer};
pub use quantize::{
    mquant_quantize, CalibSource, CalibrationRecord, MquantPipeline, QuantizedModel, Stage, SCHEMA_VERSION,
    WEIGHT_SOLVER_NOTE,
};
pub use report::{
    bench, evaluate, layer_summaries, run_samples, BenchReport, BenchRow, EvalReport, LayerSummary, RunReport,
    SampleMetrics, MAX_BENCH_LEN,
};
pub use samples::{
    generate_synthetic_samples, read_sample, read_samples_dir, write_sample, write_samples_dir, CalibSample,
    LayoutSpec, SAMPLE_EXTENSION, TEXT_BOUND, TEXT_STD, VISUAL_RANGE,
};
