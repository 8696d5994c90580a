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
    config.dataset = DatasetSource::Synthetic { spec: SyntheticSpec {
        n_train: 1200, n_val: 400, n_test: 800, dim: 10, separation: 3.0,
        immutable_offset: 1.5, sparsity_k: 2, immutable_prefix: 1, bound: 4.5, seed: 0,
    }};
    config.eval_solver.margin_threshold = 0.25;
    config.qat.lr_weights = 0.005;
    config.qat.lambda = 1e-2;
    config.qat.eta = 0.35;
    config.qat.teacher_steps = 12;
    config.qat.teacher_early_stop = true;
    let data = load_data(&config).unwrap();
    let registry = MethodRegistry::with_builtins();
    let variants: Vec<(&str, Box<dyn Fn(&mut QatParams)>)> = vec![
        ("cfq-stoch", Box::new(|_q: &mut QatParams| {})),
        ("cfq-det", Box::new(|q: &mut QatParams| { q.deterministic_gumbel = true; })),
        ("cfq-eta0", Box::new(|q: &mut QatParams| { q.eta = 0.0; })),
        ("cfq-k1", Box::new(|q: &mut QatParams| { q.teacher_steps = 1; q.teacher_early_stop = false; })),
        ("cfq-k3", Box::new(|q: &mut QatParams| { q.teacher_steps = 3; q.teacher_early_stop = false; })),
    ];
    for (name, tweak) in &variants {
        let mut vds = vec![]; let mut accs = vec![];
        for seed in [0u64, 1, 2, 3, 4] {
            let mut fp_cfg = config.fp.clone();
            fp_cfg.seed = seed;
            let fp = train_fp(&data.train, &data.val, &fp_cfg).unwrap();
            let total: usize = fp.layer_param_counts().iter().sum();
            let mut qat = config.qat.clone();
            tweak(&mut qat);
            let cfq_cfg = qat.to_cfq(4.0 * total as f64, seed).unwrap();
            let out = train_cfq(&fp, &data.train, &data.val, &data.pipeline.schema, &data.cost, &cfq_cfg).unwrap();
            let pair = ModelPair::new(&fp, &out.trained.model).unwrap();
            let report = stability_report(&pair, &data.test, &data.pipeline.schema, &data.cost, &config.eval_solver, &config.metric).unwrap();
            vds.push(report.vd_target_class.value.unwrap_or(f64::NAN));
            accs.push(report.accuracy_q);
        }
        println!("{name:>12}: vd={:?} med={:.3} acc_med={:.4}",
            vds.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(),
            median(&mut vds.clone()), median(&mut accs.clone()));
    }
    // CF-PTQ ordering.
    for variant in ["ptq-factual", "cfptq-cal", "cfptq-cal+sens"] {
        let mut vds = vec![];
        for seed in [0u64, 1, 2, 3, 4] {
            let mut fp_cfg = config.fp.clone();
            fp_cfg.seed = seed;
            let fp = train_fp(&data.train, &data.val, &fp_cfg).unwrap();
            let total: usize = fp.layer_param_counts().iter().sum();
            let cfq_cfg = config.qat.to_cfq(4.0 * total as f64, seed).unwrap();
            let mut cfptq = CfptqConfig::new(cfq_core::cfptq::CfptqVariant::PtqFactual, 4.0 * total as f64);
            cfptq.solver = cfq_cfg.teacher.clone();
            cfptq.calib_size = 256;
            let method = registry.resolve(variant).unwrap();
            let ctx = MethodContext {
                fp_model: &fp, train: &data.train, val: &data.val,
                schema: &data.pipeline.schema, cost: &data.cost,
                cfq: cfq_cfg, cfptq,
            };
            let out = method.run(&ctx).unwrap();
            let pair = ModelPair::new(&fp, &out.trained.model).unwrap();
            let report = stability_report(&pair, &data.test, &data.pipeline.schema, &data.cost, &config.eval_solver, &config.metric).unwrap();
            vds.push(report.vd_target_class.value.unwrap_or(f64::NAN));
        }
        println!("{variant:>15}: vd={:?} med={:.3}",
            vds.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(),
            median(&mut vds.clone()));
    }
}
