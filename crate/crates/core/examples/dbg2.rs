use cfq_core::data::*;
use cfq_core::harness::*;
use cfq_core::cfptq::*;
use cfq_core::metrics::*;
use cfq_core::train::*;

fn main() {
    let mut config = ExperimentConfig::synthetic_default("/tmp/unused");
    config.dataset = DatasetSource::Synthetic { spec: SyntheticSpec {
        n_train: 1200, n_val: 400, n_test: 800, dim: 10, separation: 3.0,
        immutable_offset: 1.5, sparsity_k: 2, immutable_prefix: 1, bound: 4.5, seed: 0,
    }};
    config.eval_solver.margin_threshold = 0.25;
    config.qat.teacher_steps = 12;
    config.qat.teacher_early_stop = true;
    let data = load_data(&config).unwrap();
    for seed in [0u64,1,2,3,4] {
    let mut fp_cfg = config.fp.clone();
    fp_cfg.hidden = vec![16, 16, 16];
    fp_cfg.seed = seed;
    let fp = train_fp(&data.train, &data.val, &fp_cfg).unwrap();
    let total: usize = fp.layer_param_counts().iter().sum();
    for calib in [256usize] {
        for variant in [CfptqVariant::PtqFactual, CfptqVariant::CfptqCal, CfptqVariant::CfptqCalSens] {
            let mut cfg = CfptqConfig::new(variant, 4.0 * total as f64);
            cfg.solver = config.qat.to_cfq(1.0, seed).unwrap().teacher.clone();
            cfg.solver.margin_threshold = 0.25;
            cfg.calib_size = calib;
            let out = run_cfptq(&fp, &data.train, &data.pipeline.schema, &data.cost, &cfg).unwrap();
            let atts = out.model.attachments.as_ref().unwrap();
            let bits: Vec<u32> = atts.iter().map(|a| a.selected_bits()).collect();
            let steps: Vec<f64> = atts.iter().map(|a| (a.weight_steps[a.selected]*10000.0).round()/10000.0).collect();
            let clips: Vec<f64> = atts.iter().map(|a| (a.act_params[a.selected].clip*100.0).round()/100.0).collect();
            let pair = ModelPair::new(&fp, &out.model).unwrap();
            let report = stability_report(&pair, &data.test, &data.pipeline.schema, &data.cost, &config.eval_solver, &config.metric).unwrap();
            println!("s{seed} calib={calib} {variant:?}: bits={bits:?} steps={steps:?} clips={clips:?} vd={:?} acc={:.4}",
                report.vd_target_class.value.map(|v| (v*1000.0).round()/1000.0), report.accuracy_q);
        }
    }
    }
}
