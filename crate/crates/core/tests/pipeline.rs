use mquant::aifs::ModalityLayout;
use mquant::model::{Part, ToyMllm, ToyMllmConfig};
use mquant::pipeline::{
    bench, evaluate, generate_synthetic_samples, mquant_quantize, read_samples_dir, write_samples_dir, ActMode,
    CalibSample, CalibSource, ExecOptions, LayoutSpec, MquantPipeline, PipelineConfig, QuantizedModel, RotationKind,
    Stage,
};
use mquant::Error;

fn samples(count: usize, len: usize, seed: u64) -> Vec<CalibSample> {
    generate_synthetic_samples(count, len, &LayoutSpec::balanced(len), 64, seed).unwrap()
}

fn config(bits_w: u8, bits_a: u8) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.quant.bits_w = bits_w;
    c.quant.bits_a = bits_a;
    c
}

#[test]
fn identical_inputs_give_identical_artifacts() {
    let cfg = config(4, 8);
    let model = ToyMllm::init(cfg.model.clone()).unwrap();
    let calib = samples(6, 32, 1);
    let a = mquant_quantize(&model, &calib, &cfg).unwrap();
    let b = mquant_quantize(&model, &calib, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let eval = samples(3, 32, 2);
    let opts = [a.default_options()];
    assert_eq!(evaluate(&a, &eval, &opts).unwrap(), evaluate(&b, &eval, &opts).unwrap());
}

#[test]
fn split_toggle_only_touches_triggered_layers() {
    let cfg = config(4, 8);
    let model = ToyMllm::init(cfg.model.clone()).unwrap();
    let qm = mquant_quantize(&model, &samples(4, 32, 3), &cfg).unwrap();
    let on = qm.default_options();
    let off = ExecOptions { rms: false, ..on };
    let s = &samples(1, 32, 4)[0];
    let (a, _) = qm.forward(&s.tokens, &s.layout, &on).unwrap();
    let (b, _) = qm.forward(&s.tokens, &s.layout, &off).unwrap();
    assert_ne!(a, b);

    // no visual tokens: only untriggered language-model plans are reached
    let spec = LayoutSpec::Fixed(ModalityLayout::all_text(16));
    let t = &generate_synthetic_samples(1, 16, &spec, 64, 5).unwrap()[0];
    assert_eq!(
        qm.forward(&t.tokens, &t.layout, &on).unwrap().0,
        qm.forward(&t.tokens, &t.layout, &off).unwrap().0
    );
}

#[test]
fn static_scales_stay_close_to_dynamic_baseline() {
    let cfg = config(8, 8);
    let model = ToyMllm::init(cfg.model.clone()).unwrap();
    let qm = mquant_quantize(&model, &samples(8, 32, 5), &cfg).unwrap();
    let st = qm.default_options();
    let dy = ExecOptions {
        act_mode: ActMode::DynamicPerToken,
        ..st
    };
    let r = evaluate(&qm, &samples(4, 32, 6), &[st, dy]).unwrap();
    assert!(r.runs[0].mean_cosine > 0.999);
    assert!(r.runs[1].mean_cosine > 0.999);
}

#[test]
fn stages_reject_out_of_order_calls() {
    let cfg = config(8, 8);
    let model = ToyMllm::init(cfg.model.clone()).unwrap();
    let calib = samples(2, 16, 7);
    let mut p = MquantPipeline::new(model, cfg).unwrap();
    assert!(matches!(p.rotate_vision(), Err(Error::StageOrder { .. })));
    assert!(matches!(
        p.calibrate_llm(CalibSource::Samples(&calib)),
        Err(Error::StageOrder { .. })
    ));
    p.rotate_llm().unwrap();
    assert!(matches!(p.rewrite_vision(), Err(Error::StageOrder { .. })));
    p.quantize_llm_weights().unwrap();
    p.calibrate_llm(CalibSource::Samples(&calib)).unwrap();
    p.rewrite_vision().unwrap();
    assert!(matches!(p.build_rms_plans(), Err(Error::StageOrder { .. })));
    p.rotate_vision().unwrap();
    p.calibrate_vision(CalibSource::Samples(&calib)).unwrap();
    p.build_rms_plans().unwrap();
    assert_eq!(p.stage(), Stage::RmsPlanned);
    assert!(p.finish().is_ok());
}

#[test]
fn pass_through_matches_float_for_every_rotation() {
    for rotation in [RotationKind::Identity, RotationKind::Hadamard, RotationKind::Randomized] {
        let mut cfg = config(4, 8);
        cfg.quant.rotation = rotation;
        let model = ToyMllm::init(cfg.model.clone()).unwrap();
        let qm = mquant_quantize(&model, &samples(2, 24, 8), &cfg).unwrap();
        for aifs in [true, false] {
            let opts = ExecOptions {
                passthrough: true,
                aifs,
                ..qm.default_options()
            };
            for s in samples(3, 24, 9) {
                let (y, _) = qm.forward(&s.tokens, &s.layout, &opts).unwrap();
                let want = model.forward_float(&s.tokens, &s.layout).unwrap();
                assert!(y.max_abs_diff(&want).unwrap() <= 1e-5, "{rotation:?}");
            }
        }
    }
}

#[test]
fn group_quantized_weights_run_in_float_gemm() {
    let mut cfg = config(4, 8);
    cfg.quant.weight_group_size = Some(16);
    let model = ToyMllm::init(cfg.model.clone()).unwrap();
    let qm = mquant_quantize(&model, &samples(4, 24, 10), &cfg).unwrap();
    let r = evaluate(&qm, &samples(2, 24, 11), &[qm.default_options()]).unwrap();
    assert!(r.layers.iter().all(|l| l.weight_granularity == "per_group(16)"));
    assert!(r.runs[0].mean_cosine > 0.9);
}

#[test]
fn artifacts_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("quant.toml");
    std::fs::write(&cfg_path, "[model]\nd_model = 32\nn_heads = 2\n[quant]\nbits_w = 4\n").unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    assert_eq!(
        cfg.model,
        ToyMllmConfig {
            d_model: 32,
            n_heads: 2,
            ..Default::default()
        }
    );

    let calib = generate_synthetic_samples(3, 16, &LayoutSpec::balanced(16), 32, 12).unwrap();
    write_samples_dir(&dir.path().join("samples"), &calib).unwrap();
    let read = read_samples_dir(&dir.path().join("samples")).unwrap();
    assert_eq!(read, calib);

    let model = ToyMllm::init(cfg.model.clone()).unwrap();
    let qm = mquant_quantize(&model, &read, &cfg).unwrap();
    let path = dir.path().join("q.json");
    qm.save(&path).unwrap();
    let loaded = QuantizedModel::load(&path).unwrap();
    assert_eq!(loaded, qm);
    let (a, b) = (bench(&loaded, &[8], 0).unwrap(), bench(&qm, &[8], 0).unwrap());
    assert_eq!(a.rows[0].static_scale_ops, b.rows[0].static_scale_ops);
    assert_eq!(a.rows[0].dynamic_scale_ops, b.rows[0].dynamic_scale_ops);
    assert_eq!(loaded.compliance.ratio(Part::Vision), Some(1.0));
}
