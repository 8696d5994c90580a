use cfq_core::data::*;
use cfq_core::harness::*;
use cfq_core::metrics::*;
use cfq_core::metrics::ModelPair;
use cfq_core::methods::*;
use cfq_core::cfptq::CfptqConfig;
use cfq_core::train::*;

fn median(v: &mut Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let mut config = ExperimentConfig::synthetic_default("/tmp/unused");
    config.eval_solver.margin_threshold = 0.25;
    config.qat.lr_weights = 0.005;
    config.qat.lambda = 1e-2;
    config.qat.eta = 0.35;
    config.qat.teacher_steps = 12;
    config.qat.teacher_early_stop = true;
    let data = load_data(&config).unwrap();
    let registry = MethodRegistry::with_builtins();
    // Trend: cfq vs mixedprec-accuracy at 4-bit average (0.125 of fp32).
    for m in ["cfq", "mixedprec-accuracy"] {
        let mut vds = vec![]; let mut crgs = vec![]; let mut accs = vec![];
        for seed in [0u64, 1, 2, 3, 4] {
            let mut fp_cfg = config.fp.clone();
            fp_cfg.seed = seed;
            let fp = train_fp(&data.train, &data.val, &fp_cfg).unwrap();
            let total: usize = fp.layer_param_counts().iter().sum();
            let cfq_cfg = config.qat.to_cfq(4.0 * total as f64, seed).unwrap();
            let mut cfptq = CfptqConfig::new(cfq_core::cfptq::CfptqVariant::PtqFactual, 4.0 * total as f64);
            cfptq.solver = cfq_cfg.teacher.clone();
            let ctx = MethodContext {
                fp_model: &fp, train: &data.train, val: &data.val,
                schema: &data.pipeline.schema, cost: &data.cost, cfq: cfq_cfg, cfptq,
            };
            let out = registry.resolve(m).unwrap().run(&ctx).unwrap();
            let pair = ModelPair::new(&fp, &out.trained.model).unwrap();
            let report = stability_report(&pair, &data.test, &data.pipeline.schema, &data.cost, &config.eval_solver, &config.metric).unwrap();
            vds.push(report.vd_target_class.value.unwrap());
            crgs.push(report.crg.value.unwrap());
            accs.push(report.accuracy_q);
        }
        println!("{m:>20}: vd_med={:.3} crg_med={:.3} acc_med={:.4}  vds={:?}",
            median(&mut vds.clone()), median(&mut crgs.clone()), median(&mut accs.clone()),
            vds.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
    // Budget curve.
    for m in ["cfq", "mixedprec-accuracy"] {
        print!("{m:>20} budget curve:");
        for frac in [0.25, 0.4, 0.55, 0.7, 0.85] {
            let mut vds = vec![];
            for seed in [0u64, 1, 2, 3, 4] {
                let mut fp_cfg = config.fp.clone();
                fp_cfg.seed = seed;
                let fp = train_fp(&data.train, &data.val, &fp_cfg).unwrap();
                let total: usize = fp.layer_param_counts().iter().sum();
                let budget = frac * 32.0 * total as f64;
                let cfq_cfg = config.qat.to_cfq(budget, seed).unwrap();
                let mut cfptq = CfptqConfig::new(cfq_core::cfptq::CfptqVariant::PtqFactual, budget);
                cfptq.solver = cfq_cfg.teacher.clone();
                let ctx = MethodContext {
                    fp_model: &fp, train: &data.train, val: &data.val,
                    schema: &data.pipeline.schema, cost: &data.cost, cfq: cfq_cfg, cfptq,
                };
                let out = registry.resolve(m).unwrap().run(&ctx).unwrap();
                let pair = ModelPair::new(&fp, &out.trained.model).unwrap();
                let report = stability_report(&pair, &data.test, &data.pipeline.schema, &data.cost, &config.eval_solver, &config.metric).unwrap();
                vds.push(report.vd_target_class.value.unwrap());
            }
            print!(" {frac}:{:.3}", median(&mut vds.clone()));
        }
        println!();
    }
}
