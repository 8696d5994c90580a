//! Quantization strategies behind one trait, selected by name at runtime.
//!
//! Training-based methods (the recourse-faithful objective, uniform-bit QAT,
//! accuracy-driven mixed precision) and training-free PTQ variants register
//! under string names like `cfq`, `lsq-uniform-4`, or `cfptq-cal+sens`; the
//! CLI and experiment harness resolve them through [`MethodRegistry`].

use std::collections::BTreeMap;

use crate::cfptq::{run_cfptq, CfptqConfig, CfptqVariant};
use crate::data::{CostSpec, Dataset, DatasetSchema};
use crate::error::{CfqError, Result};
use crate::nn::ModelGraph;
use crate::train::{baseline_train, train_cfq, BaselineMode, CfqConfig, TrainOutcome, TrainedModel, TrainingLog};

/// Everything a strategy needs to produce a quantized model.
pub struct MethodContext<'a> {
    pub fp_model: &'a ModelGraph,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub schema: &'a DatasetSchema,
    pub cost: &'a CostSpec,
    pub cfq: CfqConfig,
    pub cfptq: CfptqConfig,
}

/// A quantization strategy: turns a full-precision model into a quantized
/// artifact under a budget.
pub trait QuantMethod: Send + Sync {
    fn name(&self) -> &str;
    fn run(&self, ctx: &MethodContext) -> Result<TrainOutcome>;
}

struct Fp32;

impl QuantMethod for Fp32 {
    fn name(&self) -> &str {
        "fp32"
    }

    fn run(&self, ctx: &MethodContext) -> Result<TrainOutcome> {
        baseline_train(
            ctx.fp_model,
            ctx.train,
            ctx.val,
            ctx.schema,
            ctx.cost,
            &ctx.cfq,
            BaselineMode::Fp32,
        )
    }
}

struct LsqUniform {
    bits: u32,
    name: String,
}

impl QuantMethod for LsqUniform {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&self, ctx: &MethodContext) -> Result<TrainOutcome> {
        baseline_train(
            ctx.fp_model,
            ctx.train,
            ctx.val,
            ctx.schema,
            ctx.cost,
            &ctx.cfq,
            BaselineMode::LsqUniform(self.bits),
        )
    }
}

struct PactUniform {
    bits: u32,
    name: String,
}

impl QuantMethod for PactUniform {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&self, ctx: &MethodContext) -> Result<TrainOutcome> {
        baseline_train(
            ctx.fp_model,
            ctx.train,
            ctx.val,
            ctx.schema,
            ctx.cost,
            &ctx.cfq,
            BaselineMode::PactUniform(self.bits),
        )
    }
}

struct MixedPrecAccuracy;

impl QuantMethod for MixedPrecAccuracy {
    fn name(&self) -> &str {
        "mixedprec-accuracy"
    }

    fn run(&self, ctx: &MethodContext) -> Result<TrainOutcome> {
        baseline_train(
            ctx.fp_model,
            ctx.train,
            ctx.val,
            ctx.schema,
            ctx.cost,
            &ctx.cfq,
            BaselineMode::MixedPrecAccuracy,
        )
    }
}

struct Cfq;

impl QuantMethod for Cfq {
    fn name(&self) -> &str {
        "cfq"
    }

    fn run(&self, ctx: &MethodContext) -> Result<TrainOutcome> {
        train_cfq(ctx.fp_model, ctx.train, ctx.val, ctx.schema, ctx.cost, &ctx.cfq)
    }
}

struct Cfptq {
    variant: CfptqVariant,
}

impl QuantMethod for Cfptq {
    fn name(&self) -> &str {
        self.variant.name()
    }

    fn run(&self, ctx: &MethodContext) -> Result<TrainOutcome> {
        let mut cfg = ctx.cfptq.clone();
        cfg.variant = self.variant;
        let trained: TrainedModel =
            run_cfptq(ctx.fp_model, ctx.train, ctx.schema, ctx.cost, &cfg)?;
        Ok(TrainOutcome { trained, log: TrainingLog::default() })
    }
}

type Factory = fn(&str) -> Result<Box<dyn QuantMethod>>;

/// Name-to-strategy registry. Uniform-bit names carry their bitwidth as a
/// suffix (`lsq-uniform-4`).
pub struct MethodRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn parse_bits_suffix(name: &str, prefix: &str) -> Result<u32> {
    name.strip_prefix(prefix)
        .and_then(|s| s.parse::<u32>().ok())
        .filter(|&b| (2..=16).contains(&b))
        .ok_or_else(|| CfqError::invalid(format!("bad bitwidth in method name '{name}'")))
}

impl MethodRegistry {
    pub fn with_builtins() -> Self {
        let mut factories: BTreeMap<&'static str, Factory> = BTreeMap::new();
        factories.insert("fp32", |_| Ok(Box::new(Fp32)));
        factories.insert("lsq-uniform", |name| {
            let bits = parse_bits_suffix(name, "lsq-uniform-")?;
            Ok(Box::new(LsqUniform { bits, name: name.to_string() }))
        });
        factories.insert("pact-uniform", |name| {
            let bits = parse_bits_suffix(name, "pact-uniform-")?;
            Ok(Box::new(PactUniform { bits, name: name.to_string() }))
        });
        factories.insert("mixedprec-accuracy", |_| Ok(Box::new(MixedPrecAccuracy)));
        factories.insert("cfq", |_| Ok(Box::new(Cfq)));
        factories.insert("ptq-factual", |_| {
            Ok(Box::new(Cfptq { variant: CfptqVariant::PtqFactual }))
        });
        factories.insert("cfptq-cal", |_| {
            Ok(Box::new(Cfptq { variant: CfptqVariant::CfptqCal }))
        });
        factories.insert("cfptq-cal+sens", |_| {
            Ok(Box::new(Cfptq { variant: CfptqVariant::CfptqCalSens }))
        });
        MethodRegistry { factories }
    }

    /// Resolve a method name, matching parameterized families by prefix.
    pub fn resolve(&self, name: &str) -> Result<Box<dyn QuantMethod>> {
        if let Some(f) = self.factories.get(name) {
            return f(name);
        }
        for (key, f) in &self.factories {
            if name.starts_with(key) && name.len() > key.len() {
                return f(name);
            }
        }
        Err(CfqError::invalid(format!(
            "unknown method '{name}'; known: {}",
            self.known_names().join(", ")
        )))
    }

    pub fn known_names(&self) -> Vec<String> {
        self.factories
            .keys()
            .map(|k| match *k {
                "lsq-uniform" => "lsq-uniform-<bits>".to_string(),
                "pact-uniform" => "pact-uniform-<bits>".to_string(),
                other => other.to_string(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_resolves_builtins() {
        let reg = MethodRegistry::with_builtins();
        for name in [
            "fp32",
            "lsq-uniform-4",
            "pact-uniform-8",
            "mixedprec-accuracy",
            "cfq",
            "ptq-factual",
            "cfptq-cal",
            "cfptq-cal+sens",
        ] {
            let m = reg.resolve(name).unwrap();
            assert_eq!(m.name(), name);
        }
        assert!(reg.resolve("lsq-uniform-99").is_err());
        assert!(reg.resolve("nope").is_err());
    }
}
