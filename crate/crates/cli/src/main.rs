//! Command-line harness for recourse-aware quantization experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cfq_core::cfptq::{CfptqConfig, CfptqVariant};
use cfq_core::harness::{self, config_hash, ExperimentConfig, LoadedData};
use cfq_core::methods::{MethodContext, MethodRegistry};
use cfq_core::train::{self, TrainedModel};

#[derive(Parser)]
#[command(
    name = "cfq",
    about = "Recourse-aware quantization: training, PTQ, recourse generation, and stability metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config JSON; a synthetic default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training / data seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Normalized budget fraction override.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision reference model.
    TrainFp(Common),
    /// Train a quantization baseline (uniform-bit or accuracy-driven mixed precision).
    Qat {
        #[command(flatten)]
        common: Common,
        /// Method name, e.g. lsq-uniform-4, pact-uniform-4, mixedprec-accuracy.
        #[arg(long, default_value = "lsq-uniform-4")]
        method: String,
    },
    /// Train with the recourse-faithful objective and learned mixed precision.
    Cfq(Common),
    /// Training-free counterfactual-aware PTQ.
    Cfptq {
        #[command(flatten)]
        common: Common,
        /// Variant: ptq-factual | cfptq-cal | cfptq-cal+sens.
        #[arg(long, default_value = "cfptq-cal+sens")]
        variant: String,
        /// Calibration set size.
        #[arg(long)]
        calib_size: Option<usize>,
    },
    /// Emit per-example recourse records for a checkpoint.
    Recourse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the full experiment grid (methods x budgets x seeds) and report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Parallel runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overwrite an existing run with the same config hash.
        #[arg(long)]
        force: bool,
    },
    /// Grid-sweep validity weight and budget penalty on the validation split.
    Sweep(Common),
    /// The standard ablation table plus the teacher-noise sweep.
    Ablate(Common),
    /// VD/CRG across the normalized budget grid.
    BudgetCurve(Common),
    /// Re-aggregate run records from a finished experiment directory.
    Report {
        /// Directory holding runs.jsonl.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_json_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::synthetic_default(common.out.to_string_lossy()),
    };
    config.out_dir = common.out.to_string_lossy().to_string();
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(budget) = common.budget {
        config.budgets = vec![budget];
    }
    config.validate()?;
    Ok(config)
}

struct SingleRun {
    config: ExperimentConfig,
    data: LoadedData,
    seed: u64,
    budget_fraction: f64,
}

fn prepare(common: &Common) -> anyhow::Result<SingleRun> {
    let config = load_config(common)?;
    let data = harness::load_data(&config)?;
    let seed = config.seeds[0];
    let budget_fraction = config.budgets[0];
    Ok(SingleRun { config, data, seed, budget_fraction })
}

fn train_fp_model(run: &SingleRun) -> anyhow::Result<cfq_core::nn::ModelGraph> {
    let mut fp_cfg = run.config.fp.clone();
    fp_cfg.seed = run.seed;
    Ok(train::train_fp(&run.data.train, &run.data.val, &fp_cfg)?)
}

fn budget_total(run: &SingleRun, fp: &cfq_core::nn::ModelGraph) -> f64 {
    let total: usize = fp.layer_param_counts().iter().sum();
    run.budget_fraction * harness::FP_REFERENCE_BITS * total as f64
}

fn save_outcome(
    out_dir: &PathBuf,
    outcome: &train::TrainOutcome,
) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("checkpoint.json");
    outcome.trained.save(&path)?;
    let mut log = String::new();
    for rec in &outcome.log.epochs {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    std::fs::write(out_dir.join("log.jsonl"), log)?;
    Ok(path)
}

fn run_method(common: &Common, method_name: &str) -> anyhow::Result<()> {
    let run = prepare(common)?;
    let fp = train_fp_model(&run)?;
    let total = budget_total(&run, &fp);
    let cfq = run.config.qat.to_cfq(total, run.seed)?;
    let mut cfptq = CfptqConfig::new(CfptqVariant::PtqFactual, total);
    cfptq.bits = run.config.qat.bits.clone();
    cfptq.calib_size = run.config.calib_size;
    cfptq.solver = cfq.teacher.clone();
    let ctx = MethodContext {
        fp_model: &fp,
        train: &run.data.train,
        val: &run.data.val,
        schema: &run.data.pipeline.schema,
        cost: &run.data.cost,
        cfq,
        cfptq,
    };
    let registry = MethodRegistry::with_builtins();
    let method = registry.resolve(method_name)?;
    let outcome = method.run(&ctx)?;
    let path = save_outcome(&common.out, &outcome)?;
    println!("{}: checkpoint written to {}", method.name(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainFp(common) => {
            let run = prepare(&common)?;
            let fp = train_fp_model(&run)?;
            std::fs::create_dir_all(&common.out)?;
            let trained = TrainedModel { model: fp, policy: None };
            let path = common.out.join("checkpoint.json");
            trained.save(&path)?;
            let acc = trained.model.accuracy(
                &run.data.test.rows,
                &run.data.test.labels,
                cfq_core::nn::ForwardMode::Fp,
            )?;
            println!("fp model written to {} (test accuracy {:.4})", path.display(), acc);
        }
        Command::Qat { common, method } => run_method(&common, &method)?,
        Command::Cfq(common) => run_method(&common, "cfq")?,
        Command::Cfptq { common, variant, calib_size } => {
            let run = prepare(&common)?;
            let fp = train_fp_model(&run)?;
            let total = budget_total(&run, &fp);
            let mut cfg = CfptqConfig::new(CfptqVariant::parse(&variant)?, total);
            cfg.bits = run.config.qat.bits.clone();
            cfg.calib_size = calib_size.unwrap_or(run.config.calib_size);
            let trained = cfq_core::cfptq::run_cfptq(
                &fp,
                &run.data.train,
                &run.data.pipeline.schema,
                &run.data.cost,
                &cfg,
            )?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("checkpoint.json");
            trained.save(&path)?;
            println!("{variant}: checkpoint written to {}", path.display());
        }
        Command::Recourse { common, checkpoint } => {
            let run = prepare(&common)?;
            let trained = TrainedModel::load(&checkpoint)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("recourse.jsonl");
            let file = std::fs::File::create(&path)?;
            let n = harness::recourse_records(
                &trained,
                &run.data.test,
                &run.data.pipeline,
                &run.data.cost,
                &run.config.eval_solver,
                file,
            )?;
            println!("{n} recourse records written to {}", path.display());
        }
        Command::Evaluate { common, workers, force } => {
            let config = load_config(&common)?;
            let summary = harness::run_experiment(&config, force, workers)?;
            for r in &summary.records {
                let vd = r
                    .report
                    .as_ref()
                    .and_then(|rep| rep.vd_target_class.value)
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".to_string());
                println!(
                    "{} b={} s={} [{}] vd={}",
                    r.method, r.budget_fraction, r.seed, r.status, vd
                );
            }
            println!("aggregate: {}", summary.aggregate_csv.display());
            if !summary.all_ok {
                bail!("some runs failed");
            }
        }
        Command::Sweep(common) => {
            let run = prepare(&common)?;
            let fp = train_fp_model(&run)?;
            let total = budget_total(&run, &fp);
            let base = run.config.qat.to_cfq(total, run.seed)?;
            let etas = [0.25, 0.5, 1.0, 2.0];
            let lambdas = [1e-4, 1e-3, 1e-2, 1e-1];
            let outcome = train::sweep_hyperparams(
                &fp,
                &run.data.train,
                &run.data.val,
                &run.data.pipeline.schema,
                &run.data.cost,
                &base,
                &etas,
                &lambdas,
            )?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("sweep.csv");
            let mut w = csv::WriterLike::new(&path)?;
            w.header(&["eta", "lambda", "val_accuracy", "hard_bit_cost", "within_budget", "val_vd"])?;
            for row in &outcome.rows {
                w.row(&[
                    format!("{}", row.eta),
                    format!("{}", row.lambda),
                    format!("{}", row.val_accuracy),
                    format!("{}", row.hard_bit_cost),
                    format!("{}", row.within_budget),
                    format!("{}", row.val_vd),
                ])?;
            }
            w.finish()?;
            let best = outcome.best.as_ref().map(|c| (c.eta, c.budget.lambda));
            println!(
                "sweep table: {} ({} rows); best (eta, lambda) = {:?}{}",
                path.display(),
                outcome.rows.len(),
                best,
                if outcome.best_effort { " [best-effort: no run met the budget]" } else { "" }
            );
        }
        Command::Ablate(common) => {
            let config = load_config(&common)?;
            let rows = harness::ablation_suite(&config)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("ablations.csv");
            harness::write_ablation_csv(&rows, &path)?;
            println!("ablation table: {} ({} rows)", path.display(), rows.len());
        }
        Command::BudgetCurve(common) => {
            let config = load_config(&common)?;
            let rows = harness::budget_curve(&config)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("budget_curve.csv");
            harness::write_budget_curve_csv(&rows, &path)?;
            println!("budget curve: {} ({} rows)", path.display(), rows.len());
        }
        Command::Report { dir } => {
            let runs = dir.join("runs.jsonl");
            let text = std::fs::read_to_string(&runs)
                .with_context(|| format!("reading {}", runs.display()))?;
            let records: Vec<harness::RunRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()?;
            let path = dir.join("aggregate.csv");
            harness::write_aggregate_csv(&records, &path)?;
            println!(
                "aggregate rewritten: {} ({} records, hash {})",
                path.display(),
                records.len(),
                records
                    .first()
                    .map(|r| r.config_hash[..12].to_string())
                    .unwrap_or_default()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

// Tiny helper so the sweep CSV matches the harness writers without pulling
// the csv crate into the CLI manifest.
mod csv {
    use std::io::Write;
    use std::path::Path;

    pub struct WriterLike {
        file: std::fs::File,
    }

    impl WriterLike {
        pub fn new(path: &Path) -> anyhow::Result<Self> {
            Ok(WriterLike { file: std::fs::File::create(path)? })
        }

        pub fn header(&mut self, cols: &[&str]) -> anyhow::Result<()> {
            writeln!(self.file, "{}", cols.join(","))?;
            Ok(())
        }

        pub fn row(&mut self, cols: &[String]) -> anyhow::Result<()> {
            writeln!(self.file, "{}", cols.join(","))?;
            Ok(())
        }

        pub fn finish(&mut self) -> anyhow::Result<()> {
            self.file.flush()?;
            Ok(())
        }
    }
}

// Keep the binary honest about the helper import surface.
#[allow(unused_imports)]
use config_hash as _config_hash_reexport_check;
