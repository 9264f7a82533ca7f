use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mquant::model::ToyMllm;
use mquant::pipeline::{
    bench, evaluate, generate_synthetic_samples, read_samples_dir, write_samples_dir, ActMode, CalibSource,
    CalibrationRecord, ExecOptions, LayoutSpec, MquantPipeline, PipelineConfig, QuantizedModel,
};

#[derive(Parser)]
#[command(
    name = "mquant",
    version,
    about = "Post-training quantization of a toy multimodal transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded float model.
    InitModel {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write synthetic mixed-modality samples.
    GenSamples {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure activation ranges and write per-layer parameters.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Float model file; a fresh seeded model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        quant: QuantFlags,
    },
    /// Build the quantized model from a float model and calibration parameters.
    Quantize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        quant: QuantFlags,
    },
    /// Compare quantized outputs with the float model.
    Eval {
        #[arg(long)]
        qmodel: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Run without the outlier split path.
        #[arg(long)]
        no_rms: bool,
        /// Run in original token order.
        #[arg(long)]
        no_aifs: bool,
        /// Add a run with per-token dynamic activation scales.
        #[arg(long)]
        dynamic_baseline: bool,
    },
    /// Count scale applications and time static against dynamic activation scales.
    Bench {
        #[arg(long)]
        qmodel: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        lengths: Vec<usize>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct QuantFlags {
    /// Model seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bits_w: Option<u8>,
    #[arg(long)]
    bits_a: Option<u8>,
    #[arg(long)]
    no_rms: bool,
    #[arg(long)]
    no_aifs: bool,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

impl QuantFlags {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.model.seed = s;
        }
        if let Some(b) = self.bits_w {
            cfg.quant.bits_w = b;
        }
        if let Some(b) = self.bits_a {
            cfg.quant.bits_a = b;
        }
        cfg.quant.rms &= !self.no_rms;
        cfg.quant.aifs &= !self.no_aifs;
        cfg.validate()?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<ToyMllm> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn load_qmodel(path: &Path) -> Result<QuantizedModel> {
    QuantizedModel::load(path).with_context(|| format!("reading quantized model {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            write_json(&out, &ToyMllm::init(cfg.model)?)?;
            println!("wrote {}", out.display());
        }
        Command::GenSamples {
            config,
            out,
            count,
            len,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let samples = generate_synthetic_samples(count, len, &LayoutSpec::balanced(len), cfg.model.d_model, seed)?;
            let paths = write_samples_dir(&out, &samples)?;
            println!("wrote {} samples to {}", paths.len(), out.display());
        }
        Command::Calibrate {
            config,
            samples,
            out,
            model,
            quant,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            quant.apply(&mut cfg)?;
            let model = match model {
                Some(p) => load_model(&p)?,
                None => ToyMllm::init(cfg.model.clone())?,
            };
            let samples = read_samples_dir(&samples)?;
            let mut p = MquantPipeline::new(model, cfg)?;
            p.rotate_llm()?;
            p.quantize_llm_weights()?;
            p.calibrate_llm(CalibSource::Samples(&samples))?;
            p.rewrite_vision()?;
            p.rotate_vision()?;
            p.calibrate_vision(CalibSource::Samples(&samples))?;
            let record = p.calibration_record()?;
            record.save(&out)?;
            println!(
                "calibrated {} layers on {} samples; wrote {}",
                record.sites.len(),
                record.samples,
                out.display()
            );
        }
        Command::Quantize {
            config,
            model,
            calib,
            out,
            quant,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            quant.apply(&mut cfg)?;
            let record = CalibrationRecord::load(&calib).with_context(|| format!("reading {}", calib.display()))?;
            if record.config.quant.rotation != cfg.quant.rotation || record.config.quant.aifs != cfg.quant.aifs {
                log::warn!("calibration was recorded with different rotation or reordering settings");
            }
            let qm = MquantPipeline::run(load_model(&model)?, CalibSource::Record(&record), cfg)?;
            qm.save(&out)?;
            let triggered = qm.split_plans().filter(|(_, p)| p.triggered).count();
            println!(
                "quantized {} layers (W{}A{}), {triggered} split plans triggered; wrote {}",
                qm.layers.len(),
                qm.config.quant.bits_w,
                qm.config.quant.bits_a,
                out.display()
            );
        }
        Command::Eval {
            qmodel,
            samples,
            report,
            no_rms,
            no_aifs,
            dynamic_baseline,
        } => {
            let qm = load_qmodel(&qmodel)?;
            let samples = read_samples_dir(&samples)?;
            let mut base = qm.default_options();
            base.rms &= !no_rms;
            base.aifs &= !no_aifs;
            let mut runs = vec![base];
            if dynamic_baseline {
                runs.push(ExecOptions {
                    act_mode: ActMode::DynamicPerToken,
                    ..base
                });
            }
            let r = evaluate(&qm, &samples, &runs)?;
            write_json(&report, &r)?;
            for run in &r.runs {
                println!(
                    "{:?}: mean cosine {:.6}, min cosine {:.6}, mean mse {:.3e}",
                    run.options.act_mode, run.mean_cosine, run.min_cosine, run.mean_mse
                );
            }
        }
        Command::Bench {
            qmodel,
            lengths,
            report,
            seed,
        } => {
            if lengths.is_empty() {
                bail!("no lengths given");
            }
            let qm = load_qmodel(&qmodel)?;
            let r = bench(&qm, &lengths, seed)?;
            write_json(&report, &r)?;
            println!(
                "{:>6} {:>10} {:>10} {:>10} {:>10}",
                "L", "static", "dynamic", "static ms", "dynamic ms"
            );
            for row in &r.rows {
                println!(
                    "{:>6} {:>10} {:>10} {:>10.2} {:>10.2}",
                    row.len, row.static_scale_ops, row.dynamic_scale_ops, row.static_ms, row.dynamic_ms
                );
            }
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
