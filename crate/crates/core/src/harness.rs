//! Experiment orchestration: configuration, seeding, run layout, the
//! standard grids (budget curves, ablations, PTQ variants, noisy-teacher and
//! teacher-step sweeps), persistence, and aggregate reports.
//!
//! One run = (method, budget fraction, seed). Each run writes its own
//! directory with `config.json`, `log.jsonl`, `checkpoint.json`,
//! `report.json`, `report.csv`, and `timing.json`; timings stay out of
//! `report.json` so reports are byte-identical across reruns.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfptq::CfptqConfig;
use crate::data::{
    generate_synthetic, load_splits, compute_cost_weights, CostNorm, CostSpec, Dataset,
    Pipeline, RawSchema, SyntheticSpec, WeightMode,
};
use crate::error::{CfqError, Result};
use crate::methods::{MethodContext, MethodRegistry};
use crate::metrics::{stability_report, MetricConfig, StabilityReport};
use crate::nn::ForwardMode;
use crate::policy::BudgetSpec;
use crate::recourse::SolverConfig;
use crate::train::{train_fp, CfqConfig, FpTrainConfig, TrainOutcome, TrainedModel};

pub const FP_REFERENCE_BITS: f64 = 32.0;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic { spec: SyntheticSpec },
    Csv { train: String, val: String, test: String, schema: String },
}

/// Trainer knobs independent of budget and seed, resolved into a full
/// [`CfqConfig`] per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QatParams {
    pub eta: f64,
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub gamma: f64,
    pub match_on: bool,
    pub hinge_on: bool,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub teacher_step_size: f64,
    pub teacher_noise: f64,
    /// Stop the teacher recursion at the first success (wider coverage at
    /// unchanged shell depth).
    pub teacher_early_stop: bool,
    pub teacher_cache_epochs: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_quant: f64,
    pub lr_policy: f64,
    pub momentum: f64,
    pub bits: Vec<u32>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub deterministic_gumbel: bool,
    pub quantize_activations: bool,
}

impl Default for QatParams {
    fn default() -> Self {
        QatParams {
            eta: 0.35,
            lambda: 1e-2,
            alpha1: 0.0,
            alpha2: 0.0,
            beta: 0.0,
            gamma: 0.25,
            match_on: false,
            hinge_on: false,
            teacher_steps: 12,
            student_steps: 2,
            teacher_step_size: 0.1,
            teacher_noise: 0.0,
            teacher_early_stop: true,
            teacher_cache_epochs: Some(10_000),
            epochs: 30,
            batch_size: 64,
            lr_weights: 0.005,
            lr_quant: 0.005,
            lr_policy: 0.05,
            momentum: 0.9,
            bits: crate::policy::DEFAULT_BITS.to_vec(),
            tau_start: 1.0,
            tau_end: 0.1,
            deterministic_gumbel: false,
            quantize_activations: false,
        }
    }
}

impl QatParams {
    pub fn to_cfq(&self, budget_total: f64, seed: u64) -> Result<CfqConfig> {
        let budget = BudgetSpec::param_weighted(budget_total, self.lambda)?;
        let mut teacher = SolverConfig::teacher(self.teacher_steps);
        teacher.step_size = self.teacher_step_size;
        teacher.teacher_noise = self.teacher_noise;
        teacher.early_stop = self.teacher_early_stop;
        let student = SolverConfig::teacher(self.student_steps);
        Ok(CfqConfig {
            eta: self.eta,
            budget,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta: self.beta,
            gamma: self.gamma,
            match_on: self.match_on,
            hinge_on: self.hinge_on,
            detach_student: false,
            teacher,
            student,
            teacher_cache_epochs: self.teacher_cache_epochs,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_weights: self.lr_weights,
            lr_quant: self.lr_quant,
            lr_policy: self.lr_policy,
            momentum: self.momentum,
            seed,
            bits: self.bits.clone(),
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            deterministic_gumbel: self.deterministic_gumbel,
            quantize_activations: self.quantize_activations,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// Normalized budgets: hard bit cost divided by the fp32 cost 32 * sum(n_l).
    pub budgets: Vec<f64>,
    pub fp: FpTrainConfig,
    pub qat: QatParams,
    pub eval_solver: SolverConfig,
    pub metric: MetricConfig,
    pub cost_weights: WeightMode,
    pub cost_norm: CostNorm,
    pub calib_size: usize,
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn synthetic_default(out_dir: impl Into<String>) -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic { spec: SyntheticSpec::default() },
            methods: vec!["cfq".to_string(), "mixedprec-accuracy".to_string()],
            seeds: vec![0, 1, 2, 3, 4],
            budgets: vec![0.125],
            fp: FpTrainConfig::default(),
            qat: QatParams::default(),
            eval_solver: {
                // Evaluation protocol: recourse must carry a usable margin
                // buffer, not merely cross the boundary.
                let mut s = SolverConfig::evaluation();
                s.margin_threshold = 0.25;
                s
            },
            metric: MetricConfig::default(),
            cost_weights: WeightMode::InverseStd,
            cost_norm: CostNorm::L1,
            calib_size: 256,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CfqError::config("need at least one seed"));
        }
        if self.budgets.iter().any(|&b| !(0.0..=1.0).contains(&b) || b == 0.0) {
            return Err(CfqError::config("budgets must lie in (0, 1]"));
        }
        if self.methods.is_empty() {
            return Err(CfqError::config("need at least one method"));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 of the canonical JSON form (serde_json object keys are sorted).
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let value = serde_json::to_value(config)?;
    let canon = serde_json::to_string(&value)?;
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    Ok(crate::nn::hex_string(&hasher.finalize()))
}

// ── Data loading ────────────────────────────────────────────────────────

pub struct LoadedData {
    pub pipeline: Pipeline,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub cost: CostSpec,
}

pub fn load_data(config: &ExperimentConfig) -> Result<LoadedData> {
    let (pipeline, train, val, test) = match &config.dataset {
        DatasetSource::Synthetic { spec } => generate_synthetic(spec)?,
        DatasetSource::Csv { train, val, test, schema } => {
            let raw = RawSchema::from_json_file(schema)?;
            load_splits(&raw, train, val, test)?
        }
    };
    let cost = compute_cost_weights(&pipeline.stats, config.cost_weights, config.cost_norm);
    Ok(LoadedData { pipeline, train, val, test, cost })
}

// ── Run records ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub budget_fraction: f64,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub status: String,
    pub report: Option<StabilityReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub fp_train_secs: f64,
    pub method_secs: f64,
    pub eval_secs: f64,
    /// Teacher-phase share of training, for complexity accounting.
    pub teacher_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub records: Vec<RunRecord>,
    pub all_ok: bool,
    pub aggregate_csv: PathBuf,
}

fn budget_tag(frac: f64) -> String {
    format!("b{:.4}", frac).replace('.', "_")
}

/// Execute the full grid. Runs are independent; failures are recorded and
/// the remaining runs continue. Reruns with an unchanged config hash are
/// refused unless `force` is set.
pub fn run_experiment(
    config: &ExperimentConfig,
    force: bool,
    workers: usize,
) -> Result<ExperimentSummary> {
    config.validate()?;
    let hash = config_hash(config)?;
    let out = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out)?;

    // Idempotence guard.
    let marker = out.join("config.json");
    if marker.exists() && !force {
        let existing: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&marker)?)?;
        if existing.get("config_hash").and_then(|v| v.as_str()) == Some(hash.as_str()) {
            return Err(CfqError::Run(format!(
                "output {} already holds this config (hash {}); pass --force to rerun",
                out.display(),
                &hash[..12]
            )));
        }
    }
    let mut wrapped = serde_json::to_value(config)?;
    wrapped["config_hash"] = serde_json::Value::String(hash.clone());
    std::fs::write(&marker, serde_json::to_string_pretty(&wrapped)?)?;

    let data = load_data(config)?;
    let registry = MethodRegistry::with_builtins();
    // Resolve every method up front so typos fail before any training.
    for m in &config.methods {
        registry.resolve(m)?;
    }

    let mut specs = Vec::new();
    for method in &config.methods {
        for &budget in &config.budgets {
            for &seed in &config.seeds {
                specs.push((method.clone(), budget, seed));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CfqError::Run(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        use rayon::prelude::*;
        specs
            .par_iter()
            .map(|(method, budget, seed)| {
                run_single(config, &data, &hash, method, *budget, *seed)
                    .unwrap_or_else(|e| RunRecord {
                        method: method.clone(),
                        budget_fraction: *budget,
                        seed: *seed,
                        config_hash: hash.clone(),
                        version: env!("CARGO_PKG_VERSION").to_string(),
                        status: format!("failed: {e}"),
                        report: None,
                    })
            })
            .collect()
    });

    // Persist raw records and the aggregate table.
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    std::fs::write(out.join("runs.jsonl"), jsonl)?;
    let aggregate_csv = out.join("aggregate.csv");
    write_aggregate_csv(&records, &aggregate_csv)?;
    let all_ok = records.iter().all(|r| r.status == "ok");
    Ok(ExperimentSummary { records, all_ok, aggregate_csv })
}

/// One (method, budget, seed) cell: pretrain, quantize, evaluate, persist.
pub fn run_single(
    config: &ExperimentConfig,
    data: &LoadedData,
    hash: &str,
    method_name: &str,
    budget_fraction: f64,
    seed: u64,
) -> Result<RunRecord> {
    let out = PathBuf::from(&config.out_dir)
        .join(method_name)
        .join(budget_tag(budget_fraction))
        .join(format!("s{seed}"));
    std::fs::create_dir_all(&out)?;

    let registry = MethodRegistry::with_builtins();
    let method = registry.resolve(method_name)?;

    let t0 = std::time::Instant::now();
    let mut fp_cfg = config.fp.clone();
    fp_cfg.seed = seed;
    let fp_model = train_fp(&data.train, &data.val, &fp_cfg)?;
    let fp_train_secs = t0.elapsed().as_secs_f64();

    let total_params: usize = fp_model.layer_param_counts().iter().sum();
    let budget_total = budget_fraction * FP_REFERENCE_BITS * total_params as f64;
    let cfq = config.qat.to_cfq(budget_total, seed)?;
    let mut cfptq = CfptqConfig::new(crate::cfptq::CfptqVariant::PtqFactual, budget_total);
    cfptq.bits = config.qat.bits.clone();
    cfptq.calib_size = config.calib_size;
    cfptq.solver = cfq.teacher.clone();

    let ctx = MethodContext {
        fp_model: &fp_model,
        train: &data.train,
        val: &data.val,
        schema: &data.pipeline.schema,
        cost: &data.cost,
        cfq,
        cfptq,
    };
    let t1 = std::time::Instant::now();
    let outcome: TrainOutcome = method.run(&ctx)?;
    let method_secs = t1.elapsed().as_secs_f64();

    let t2 = std::time::Instant::now();
    // Deployment pair: recourse promises come from the pretrained reference;
    // the method's quantized forward is what ships.
    let pair = crate::metrics::ModelPair::new(&fp_model, &outcome.trained.model)?;
    let report = stability_report(
        &pair,
        &data.test,
        &data.pipeline.schema,
        &data.cost,
        &config.eval_solver,
        &config.metric,
    )?;
    let eval_secs = t2.elapsed().as_secs_f64();

    // Artifacts.
    outcome.trained.save(out.join("checkpoint.json"))?;
    let mut log_jsonl = String::new();
    for rec in &outcome.log.epochs {
        log_jsonl.push_str(&serde_json::to_string(rec)?);
        log_jsonl.push('\n');
    }
    std::fs::write(out.join("log.jsonl"), log_jsonl)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_report_csv(&report, out.join("report.csv"))?;
    let run_cfg = serde_json::json!({
        "method": method_name,
        "budget_fraction": budget_fraction,
        "seed": seed,
        "config_hash": hash,
    });
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&run_cfg)?)?;
    let timing = TimingRecord {
        fp_train_secs,
        method_secs,
        eval_secs,
        teacher_secs: outcome.log.step_stats.teacher_nanos as f64 * 1e-9,
    };
    std::fs::write(out.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;

    Ok(RunRecord {
        method: method_name.to_string(),
        budget_fraction,
        seed,
        config_hash: hash.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: "ok".to_string(),
        report: Some(report),
    })
}

// ── CSV emission and the report reader ──────────────────────────────────

/// Flat per-run rows: metric, slice, value, numerator, denominator.
pub fn write_report_csv(report: &StabilityReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["metric", "slice", "value", "numerator", "denominator"])?;
    let mut row = |metric: &str, slice: &str, value: Option<f64>, num: usize, den: usize| {
        w.write_record([
            metric,
            slice,
            &value.map(|v| format!("{v}")).unwrap_or_default(),
            &format!("{num}"),
            &format!("{den}"),
        ])
    };
    row("accuracy_fp", "all", Some(report.accuracy_fp), 0, 0)?;
    row("accuracy_q", "all", Some(report.accuracy_q), 0, 0)?;
    row(
        "vd_target_class",
        "all",
        report.vd_target_class.value,
        report.vd_target_class.numerator,
        report.vd_target_class.denominator,
    )?;
    row(
        "vd_label_mismatch",
        "all",
        report.vd_label_mismatch.value,
        report.vd_label_mismatch.numerator,
        report.vd_label_mismatch.denominator,
    )?;
    row("crg", "all", report.crg.value, 0, report.crg.count)?;
    row("dirsim", "all", report.dirsim.value, 0, report.dirsim.count)?;
    row("act_overlap", "all", report.act_overlap.value, 0, report.act_overlap.count)?;
    row(
        "frr_fp",
        "all",
        report.frr_fp.value,
        report.frr_fp.numerator,
        report.frr_fp.denominator,
    )?;
    row("frr_q", "all", report.frr_q.value, report.frr_q.numerator, report.frr_q.denominator)?;
    for s in &report.subgroups.slices {
        row(
            "vd_target_class",
            &format!("group{}", s.group),
            s.vd.value,
            s.vd.numerator,
            s.vd.denominator,
        )?;
        row("crg", &format!("group{}", s.group), s.crg.value, 0, s.crg.count)?;
    }
    row("eps_q95", "all", Some(report.eps_q95), 0, 0)?;
    row("eps_max", "all", Some(report.eps_max), 0, 0)?;
    row("risk_fraction", "all", Some(report.risk_fraction), 0, 0)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub slice: String,
    pub value: Option<f64>,
    pub numerator: usize,
    pub denominator: usize,
}

/// Reader for the flat per-run CSV; every writer output parses back.
pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(ReportRow {
            metric: rec[0].to_string(),
            slice: rec[1].to_string(),
            value: if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse().map_err(|_| CfqError::data("bad float in report csv"))?)
            },
            numerator: rec[3].parse().map_err(|_| CfqError::data("bad numerator"))?,
            denominator: rec[4].parse().map_err(|_| CfqError::data("bad denominator"))?,
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregate across seeds: one row per (method, budget) with mean, std, and
/// median columns plus pooled denominators.
pub fn write_aggregate_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record([
        "method",
        "budget_fraction",
        "seeds",
        "vd_mean",
        "vd_std",
        "vd_median",
        "vd_denominator",
        "crg_mean",
        "crg_std",
        "crg_median",
        "crg_denominator",
        "dirsim_mean",
        "overlap_mean",
        "acc_q_mean",
        "acc_q_std",
        "frr_fp_mean",
        "frr_q_mean",
        "risk_mean",
    ])?;
    let mut keys: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.method.clone(), format!("{}", r.budget_fraction)))
        .collect();
    keys.sort();
    keys.dedup();
    for (method, budget) in keys {
        let group: Vec<&RunRecord> = records
            .iter()
            .filter(|r| {
                r.method == method && format!("{}", r.budget_fraction) == budget && r.report.is_some()
            })
            .collect();
        if group.is_empty() {
            continue;
        }
        let get = |f: &dyn Fn(&StabilityReport) -> Option<f64>| -> Vec<f64> {
            group.iter().filter_map(|r| f(r.report.as_ref().unwrap())).collect()
        };
        let vd = get(&|r| r.vd_target_class.value);
        let crg = get(&|r| r.crg.value);
        let dirsim = get(&|r| r.dirsim.value);
        let overlap = get(&|r| r.act_overlap.value);
        let acc = get(&|r| Some(r.accuracy_q));
        let frr_fp = get(&|r| r.frr_fp.value);
        let frr_q = get(&|r| r.frr_q.value);
        let risk = get(&|r| Some(r.risk_fraction));
        let vd_den: usize =
            group.iter().map(|r| r.report.as_ref().unwrap().vd_target_class.denominator).sum();
        let crg_den: usize = group.iter().map(|r| r.report.as_ref().unwrap().crg.count).sum();
        let (vd_m, vd_s) = if vd.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&vd) };
        let (crg_m, crg_s) = if crg.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&crg) };
        let (acc_m, acc_s) = mean_std(&acc);
        let avg = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        w.write_record([
            method.as_str(),
            budget.as_str(),
            &format!("{}", group.len()),
            &format!("{vd_m}"),
            &format!("{vd_s}"),
            &format!("{}", median(&vd)),
            &format!("{vd_den}"),
            &format!("{crg_m}"),
            &format!("{crg_s}"),
            &format!("{}", median(&crg)),
            &format!("{crg_den}"),
            &format!("{}", avg(&dirsim)),
            &format!("{}", avg(&overlap)),
            &format!("{acc_m}"),
            &format!("{acc_s}"),
            &format!("{}", avg(&frr_fp)),
            &format!("{}", avg(&frr_q)),
            &format!("{}", avg(&risk)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Margin CDF pairs as CSV.
pub fn write_margin_cdf_csv(cdf: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["margin", "cdf"])?;
    for (m, c) in cdf {
        w.write_record([&format!("{m}"), &format!("{c}")])?;
    }
    w.flush()?;
    Ok(())
}

// ── Recourse record emission ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecourseRecord {
    pub index: usize,
    pub delta: Vec<f64>,
    pub cost: f64,
    pub feasible: bool,
    pub label_fp: usize,
    pub label_q: usize,
}

/// Per-example recourse records for a checkpoint, as JSON lines.
pub fn recourse_records(
    trained: &TrainedModel,
    data: &Dataset,
    pipeline: &Pipeline,
    cost: &CostSpec,
    solver: &SolverConfig,
    out: impl Write,
) -> Result<usize> {
    let pair = crate::metrics::ModelPair::of_single(&trained.model)?;
    let pairs = crate::metrics::evaluate_pairs(&pair, data, &pipeline.schema, cost, solver)?;
    let mut out = out;
    let mut n = 0;
    for e in &pairs.examples {
        let rec = RecourseRecord {
            index: e.index,
            delta: e.fp.delta.clone(),
            cost: e.fp.cost,
            feasible: e.fp.feasible,
            label_fp: e.fp_label_at_fp_point,
            label_q: e.q_label_at_fp_point,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        n += 1;
    }
    Ok(n)
}

// ── Ablations and budget curves ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub vd: Option<f64>,
    pub crg: Option<f64>,
    pub config_hash: String,
}

/// The standard ablation grid: full objective, no-validity, uniform bits at
/// matched average cost, teacher steps K in {1,3}, and the teacher-noise
/// sweep sigma in {0, 0.01, 0.05, 0.10}.
pub fn ablation_suite(config: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let data = load_data(config)?;
    let budget_fraction = config.budgets[0];
    let mut rows = Vec::new();

    let mut variants: Vec<(String, QatParams, Option<Vec<u32>>)> = Vec::new();
    let base = config.qat.clone();
    let mut k3 = base.clone();
    k3.teacher_steps = 3;
    variants.push(("cfq-full".into(), k3.clone(), None));
    let mut eta0 = base.clone();
    eta0.eta = 0.0;
    variants.push(("cfq-eta0".into(), eta0, None));
    variants.push(("cfq-uniform-bits".into(), base.clone(), Some(vec![])));
    let mut k1 = base.clone();
    k1.teacher_steps = 1;
    variants.push(("cfq-k1".into(), k1, None));
    variants.push(("cfq-k3".into(), k3.clone(), None));
    for sigma in [0.0, 0.01, 0.05, 0.10] {
        let mut noisy = k3.clone();
        noisy.teacher_noise = sigma;
        variants.push((format!("cfq-noise-{sigma}"), noisy, None));
    }

    for (name, params, uniform) in &variants {
        for &seed in &config.seeds {
            let mut fp_cfg = config.fp.clone();
            fp_cfg.seed = seed;
            let fp_model = train_fp(&data.train, &data.val, &fp_cfg)?;
            let total: usize = fp_model.layer_param_counts().iter().sum();
            let budget_total = budget_fraction * FP_REFERENCE_BITS * total as f64;
            let cfq = params.to_cfq(budget_total, seed)?;
            let hash = config_hash(&(name, &cfq))?;
            let outcome = if uniform.is_some() {
                // Uniform bits at matched average cost: the largest candidate
                // bit whose uniform cost fits the budget.
                let avg = budget_total / total as f64;
                let bit = params
                    .bits
                    .iter()
                    .copied()
                    .filter(|&b| (b as f64) <= avg)
                    .max()
                    .unwrap_or(params.bits[0]);
                let bits = vec![bit; fp_model.num_layers()];
                crate::train::train_qat_fixed_bits(
                    &fp_model,
                    &data.train,
                    &data.val,
                    &data.pipeline.schema,
                    &data.cost,
                    &cfq,
                    bits,
                )?
            } else {
                crate::train::train_cfq(
                    &fp_model,
                    &data.train,
                    &data.val,
                    &data.pipeline.schema,
                    &data.cost,
                    &cfq,
                )?
            };
            let pair = crate::metrics::ModelPair::new(&fp_model, &outcome.trained.model)?;
            let report = stability_report(
                &pair,
                &data.test,
                &data.pipeline.schema,
                &data.cost,
                &config.eval_solver,
                &config.metric,
            )?;
            rows.push(AblationRow {
                variant: name.clone(),
                seed,
                accuracy: report.accuracy_q,
                vd: report.vd_target_class.value,
                crg: report.crg.value,
                config_hash: hash,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["variant", "seed", "accuracy", "vd", "crg", "config_hash"])?;
    for r in rows {
        w.write_record([
            r.variant.as_str(),
            &format!("{}", r.seed),
            &format!("{}", r.accuracy),
            &r.vd.map(|v| format!("{v}")).unwrap_or_default(),
            &r.crg.map(|v| format!("{v}")).unwrap_or_default(),
            r.config_hash.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetCurveRow {
    pub method: String,
    pub budget_fraction: f64,
    pub seed: u64,
    pub vd: Option<f64>,
    pub crg: Option<f64>,
    pub accuracy: f64,
}

/// VD/CRG per (method, normalized budget, seed) over the standard grid.
pub fn budget_curve(config: &ExperimentConfig) -> Result<Vec<BudgetCurveRow>> {
    config.validate()?;
    let data = load_data(config)?;
    let mut rows = Vec::new();
    for method_name in &config.methods {
        let registry = MethodRegistry::with_builtins();
        let method = registry.resolve(method_name)?;
        for &budget_fraction in &config.budgets {
            for &seed in &config.seeds {
                let mut fp_cfg = config.fp.clone();
                fp_cfg.seed = seed;
                let fp_model = train_fp(&data.train, &data.val, &fp_cfg)?;
                let total: usize = fp_model.layer_param_counts().iter().sum();
                let budget_total = budget_fraction * FP_REFERENCE_BITS * total as f64;
                let cfq = config.qat.to_cfq(budget_total, seed)?;
                let mut cfptq =
                    CfptqConfig::new(crate::cfptq::CfptqVariant::PtqFactual, budget_total);
                cfptq.bits = config.qat.bits.clone();
                cfptq.calib_size = config.calib_size;
                cfptq.solver = cfq.teacher.clone();
                let ctx = MethodContext {
                    fp_model: &fp_model,
                    train: &data.train,
                    val: &data.val,
                    schema: &data.pipeline.schema,
                    cost: &data.cost,
                    cfq,
                    cfptq,
                };
                let outcome = method.run(&ctx)?;
                let pair = crate::metrics::ModelPair::new(&fp_model, &outcome.trained.model)?;
                let report = stability_report(
                    &pair,
                    &data.test,
                    &data.pipeline.schema,
                    &data.cost,
                    &config.eval_solver,
                    &config.metric,
                )?;
                rows.push(BudgetCurveRow {
                    method: method_name.clone(),
                    budget_fraction,
                    seed,
                    vd: report.vd_target_class.value,
                    crg: report.crg.value,
                    accuracy: report.accuracy_q,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_budget_curve_csv(rows: &[BudgetCurveRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["method", "budget_fraction", "seed", "vd", "crg", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.method.as_str(),
            &format!("{}", r.budget_fraction),
            &format!("{}", r.seed),
            &r.vd.map(|v| format!("{v}")).unwrap_or_default(),
            &r.crg.map(|v| format!("{v}")).unwrap_or_default(),
            &format!("{}", r.accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience used by tests and the CLI `evaluate` subcommand.
pub fn evaluate_checkpoint(
    trained: &TrainedModel,
    data: &Dataset,
    pipeline: &Pipeline,
    cost: &CostSpec,
    eval_solver: &SolverConfig,
    metric: &MetricConfig,
) -> Result<StabilityReport> {
    let _ = ForwardMode::Fp;
    let pair = crate::metrics::ModelPair::of_single(&trained.model)?;
    stability_report(&pair, data, &pipeline.schema, cost, eval_solver, metric)
}
