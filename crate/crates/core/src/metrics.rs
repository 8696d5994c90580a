//! Recourse-stability metrics over a (full-precision, quantized) model pair:
//! validity drop, relative cost gap, direction similarity, support overlap,
//! feasible-recourse rates, subgroup slices, empirical logit-perturbation
//! estimators, and the margin-risk indicator.
//!
//! Every ratio carries its numerator and denominator; undefined ratios stay
//! `None` instead of defaulting to a number.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CostSpec, Dataset, DatasetSchema, DEFAULT_EPS};
use crate::error::{CfqError, Result};
use crate::mat::{dot, l2_norm, linf_norm, Mat};
use crate::nn::{argmax, target_margin, CompiledModel, ForwardMode, ModelGraph};
use crate::recourse::{pgd_recourse, ActionSet, RecourseResult, SolverConfig};
use crate::train::recourse_targets;

/// Default support threshold for action-overlap.
pub const DEFAULT_TAU_SUPP: f64 = 1e-3;
/// Default neighborhood radius for perturbation estimates.
pub const DEFAULT_RHO: f64 = 0.05;
/// Default Monte-Carlo sample count per recourse point.
pub const DEFAULT_MC_SAMPLES: usize = 64;

// ── Paired per-example records ──────────────────────────────────────────

/// Recourse solved on both logit maps of one model with one solver config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedExample {
    pub index: usize,
    pub y_tgt: usize,
    pub group: Option<usize>,
    pub fp: RecourseResult,
    pub quant: RecourseResult,
    /// f(x + delta_f*) under the fp map.
    pub fp_label_at_fp_point: usize,
    /// f_q(x + delta_f*) under the quantized map.
    pub q_label_at_fp_point: usize,
    /// m_f(x + delta_f*; y_tgt).
    pub fp_margin_at_fp_point: f64,
    /// x + delta_f*, kept for perturbation diagnostics.
    pub recourse_point: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedRecourse {
    pub examples: Vec<PairedExample>,
    pub solver: SolverConfig,
    /// Points with an unfavorable fp prediction (the eligible pool).
    pub eligible: usize,
}

/// The deployment pair: the full-precision reference model on which
/// recourse is computed, and the quantized model actually deployed.
pub struct ModelPair {
    pub fp: CompiledModel,
    pub quant: CompiledModel,
}

impl ModelPair {
    /// Pair a reference model's fp path with a quantized artifact. A model
    /// without attachments contributes its fp path (identity deployment).
    pub fn new(reference: &ModelGraph, deployed: &ModelGraph) -> Result<Self> {
        let fp = CompiledModel::compile(reference, ForwardMode::Fp)?;
        let quant = if deployed.attachments.is_some() {
            CompiledModel::compile(deployed, ForwardMode::Quantized)?
        } else {
            CompiledModel::compile(deployed, ForwardMode::Fp)?
        };
        Ok(ModelPair { fp, quant })
    }

    /// Both paths of one model (attachments applied on the quantized side).
    pub fn of_single(model: &ModelGraph) -> Result<Self> {
        ModelPair::new(model, model)
    }
}

/// Solve recourse on both sides of the pair for every test point with an
/// unfavorable prediction under the reference. Both sides use the identical
/// solver configuration.
pub fn evaluate_pairs(
    pair: &ModelPair,
    data: &Dataset,
    schema: &DatasetSchema,
    cost: &CostSpec,
    solver: &SolverConfig,
) -> Result<PairedRecourse> {
    let fp = &pair.fp;
    let quant = &pair.quant;
    let preds: Vec<usize> = (0..data.len()).map(|i| fp.predict(data.rows.row(i))).collect();
    let targets = recourse_targets(schema, &preds)?;
    let eligible: Vec<usize> =
        (0..data.len()).filter(|&i| targets[i].is_some()).collect();

    let examples: Vec<PairedExample> = eligible
        .par_iter()
        .map(|&i| -> Result<PairedExample> {
            let x = data.rows.row(i);
            let y_tgt = targets[i].expect("eligible");
            let aset = ActionSet::new(schema, x)?;
            let fp_res = pgd_recourse(&fp, x, y_tgt, &aset, cost, solver, None)?;
            let q_res = pgd_recourse(&quant, x, y_tgt, &aset, cost, solver, None)?;
            let u: Vec<f64> = x.iter().zip(&fp_res.delta).map(|(a, b)| a + b).collect();
            let fl = fp.logits(&u);
            let ql = quant.logits(&u);
            Ok(PairedExample {
                index: i,
                y_tgt,
                group: data.groups.as_ref().map(|g| g[i]),
                fp_label_at_fp_point: argmax(&fl),
                q_label_at_fp_point: argmax(&ql),
                fp_margin_at_fp_point: target_margin(&fl, y_tgt)?,
                recourse_point: u,
                fp: fp_res,
                quant: q_res,
            })
        })
        .collect::<Result<_>>()?;

    Ok(PairedRecourse { examples, solver: solver.clone(), eligible: eligible.len() })
}

// ── Ratio / mean helpers ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: Option<f64>,
    pub numerator: usize,
    pub denominator: usize,
}

impl Ratio {
    pub fn new(numerator: usize, denominator: usize) -> Self {
        let value =
            if denominator == 0 { None } else { Some(numerator as f64 / denominator as f64) };
        Ratio { value, numerator, denominator }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStat {
    pub value: Option<f64>,
    pub count: usize,
}

fn mean_stat(values: &[f64]) -> MeanStat {
    if values.is_empty() {
        MeanStat { value: None, count: 0 }
    } else {
        MeanStat {
            value: Some(values.iter().sum::<f64>() / values.len() as f64),
            count: values.len(),
        }
    }
}

// ── Core metrics ────────────────────────────────────────────────────────

/// Validity drop. Primary variant: among examples whose fp recourse
/// succeeded, the fraction where the quantized model misses the target class
/// at the fp recourse point. The label-mismatch variant compares the two
/// models' labels at the same point.
pub fn validity_drop(pairs: &PairedRecourse) -> (Ratio, Ratio) {
    let ok: Vec<&PairedExample> =
        pairs.examples.iter().filter(|e| e.fp.feasible).collect();
    let target_fail = ok.iter().filter(|e| e.q_label_at_fp_point != e.y_tgt).count();
    let mismatch =
        ok.iter().filter(|e| e.q_label_at_fp_point != e.fp_label_at_fp_point).count();
    (Ratio::new(target_fail, ok.len()), Ratio::new(mismatch, ok.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityTransitions {
    pub both_feasible: usize,
    pub fp_only: usize,
    pub q_only: usize,
    pub both_infeasible: usize,
}

/// Mean relative cost change over examples where both models admit feasible
/// recourse; infeasibility transitions are counted separately.
pub fn recourse_gap(pairs: &PairedRecourse, eps: f64) -> (MeanStat, FeasibilityTransitions) {
    let mut values = Vec::new();
    let mut tr = FeasibilityTransitions {
        both_feasible: 0,
        fp_only: 0,
        q_only: 0,
        both_infeasible: 0,
    };
    for e in &pairs.examples {
        match (e.fp.feasible, e.quant.feasible) {
            (true, true) => {
                tr.both_feasible += 1;
                values.push((e.quant.cost - e.fp.cost) / (e.fp.cost + eps));
            }
            (true, false) => tr.fp_only += 1,
            (false, true) => tr.q_only += 1,
            (false, false) => tr.both_infeasible += 1,
        }
    }
    (mean_stat(&values), tr)
}

/// Mean cosine similarity of paired actions; near-zero actions are excluded
/// and counted separately.
pub fn direction_similarity(pairs: &PairedRecourse, eps: f64) -> (MeanStat, usize) {
    let mut values = Vec::new();
    let mut degenerate = 0usize;
    for e in pairs.examples.iter().filter(|e| e.fp.feasible && e.quant.feasible) {
        let na = l2_norm(&e.fp.delta);
        let nb = l2_norm(&e.quant.delta);
        if na < 1e-12 || nb < 1e-12 {
            degenerate += 1;
            continue;
        }
        values.push(dot(&e.fp.delta, &e.quant.delta) / (na * nb + eps));
    }
    (mean_stat(&values), degenerate)
}

fn support(delta: &[f64], tau: f64) -> Vec<usize> {
    delta
        .iter()
        .enumerate()
        .filter(|(_, &v)| v.abs() > tau)
        .map(|(j, _)| j)
        .collect()
}

/// Mean Jaccard overlap of thresholded supports.
pub fn action_overlap(pairs: &PairedRecourse, tau_supp: f64, eps: f64) -> MeanStat {
    let mut values = Vec::new();
    for e in pairs.examples.iter().filter(|e| e.fp.feasible && e.quant.feasible) {
        let sa = support(&e.fp.delta, tau_supp);
        let sb = support(&e.quant.delta, tau_supp);
        let inter = sa.iter().filter(|j| sb.contains(j)).count();
        let union = sa.len() + sb.len() - inter;
        values.push(inter as f64 / (union as f64 + eps));
    }
    mean_stat(&values)
}

/// Fraction of currently-unfavorable points for which the solver finds a
/// feasible successful action under the given logit map.
pub fn feasible_recourse_rate(
    cm: &CompiledModel,
    data: &Dataset,
    schema: &DatasetSchema,
    cost: &CostSpec,
    solver: &SolverConfig,
) -> Result<Ratio> {
    let preds: Vec<usize> = (0..data.len()).map(|i| cm.predict(data.rows.row(i))).collect();
    let targets = recourse_targets(schema, &preds)?;
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| targets[i].is_some()).collect();
    let found: usize = eligible
        .par_iter()
        .map(|&i| -> Result<usize> {
            let x = data.rows.row(i);
            let aset = ActionSet::new(schema, x)?;
            let res = pgd_recourse(&cm, x, targets[i].unwrap(), &aset, cost, solver, None)?;
            Ok(res.feasible as usize)
        })
        .sum::<Result<usize>>()?;
    Ok(Ratio::new(found, eligible.len()))
}

// ── Subgroup slices ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupSlice {
    pub group: usize,
    pub vd: Ratio,
    pub crg: MeanStat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupSummary {
    pub slices: Vec<SubgroupSlice>,
    pub worst_group_vd: Option<f64>,
    pub delta_vd: Option<f64>,
    pub delta_crg: Option<f64>,
}

/// Conditional VD/CRG per subgroup plus worst-group and gap summaries.
/// Groups with empty denominators are reported but excluded from the gaps.
pub fn subgroup_slices(pairs: &PairedRecourse, eps: f64) -> SubgroupSummary {
    let mut groups: Vec<usize> =
        pairs.examples.iter().filter_map(|e| e.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut slices = Vec::new();
    for &g in &groups {
        let sub: Vec<PairedExample> = pairs
            .examples
            .iter()
            .filter(|e| e.group == Some(g))
            .cloned()
            .collect();
        let subpairs = PairedRecourse {
            examples: sub,
            solver: pairs.solver.clone(),
            eligible: 0,
        };
        let (vd, _) = validity_drop(&subpairs);
        let (crg, _) = recourse_gap(&subpairs, eps);
        slices.push(SubgroupSlice { group: g, vd, crg });
    }
    let vds: Vec<f64> = slices.iter().filter_map(|s| s.vd.value).collect();
    let crgs: Vec<f64> = slices.iter().filter_map(|s| s.crg.value).collect();
    let minmax = |v: &[f64]| -> Option<(f64, f64)> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            }))
        }
    };
    SubgroupSummary {
        worst_group_vd: minmax(&vds).map(|(_, hi)| hi),
        delta_vd: minmax(&vds).map(|(lo, hi)| hi - lo),
        delta_crg: minmax(&crgs).map(|(lo, hi)| hi - lo),
        slices,
    }
}

// ── Logit-perturbation estimators ───────────────────────────────────────

/// Per-point empirical perturbation: max over samples in the rho-ball of the
/// sup-norm logit difference. A finite-sample lower bound on the true value.
/// Growing `samples` with the same seed extends the sample set, so the
/// estimate is nondecreasing in `samples`.
pub fn epsilon_monte_carlo(
    fp: &CompiledModel,
    quant: &CompiledModel,
    points: &[Vec<f64>],
    rho: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(CfqError::invalid("need at least one sample"));
    }
    if rho < 0.0 {
        return Err(CfqError::invalid("rho must be nonnegative"));
    }
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = point_rng(seed, i);
            let d = u.len();
            let mut worst = 0.0f64;
            for _ in 0..samples {
                let v = sample_in_ball(u, rho, d, &mut rng);
                let gf = fp.logits(&v);
                let gq = quant.logits(&v);
                let diff: Vec<f64> = gf.iter().zip(&gq).map(|(a, b)| b - a).collect();
                worst = worst.max(linf_norm(&diff));
            }
            worst
        })
        .collect())
}

fn point_rng(seed: u64, index: usize) -> ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((index as u64).to_le_bytes());
    hasher.update(b"eps-mc");
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha8Rng::from_seed(key)
}

fn sample_in_ball(center: &[f64], rho: f64, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    if rho == 0.0 {
        return center.to_vec();
    }
    let mut dir: Vec<f64> = (0..d).map(|_| crate::data::standard_normal(rng)).collect();
    let n = l2_norm(&dir).max(1e-300);
    let u: f64 = rng.gen_range(0.0..1.0f64);
    let r = rho * u.powf(1.0 / d as f64);
    for v in dir.iter_mut() {
        *v = *v / n * r;
    }
    dir.iter_mut().zip(center).for_each(|(v, c)| *v += c);
    dir
}

/// 0.95-quantile and max aggregates of per-point estimates.
pub fn epsilon_aggregates(eps: &[f64]) -> (f64, f64) {
    if eps.is_empty() {
        return (0.0, 0.0);
    }
    let mut sorted = eps.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((0.95 * (sorted.len() as f64 - 1.0)).round() as usize).min(sorted.len() - 1);
    (sorted[idx], *sorted.last().unwrap())
}

/// First-order estimate: sup-norm bias at the point plus rho times the
/// l2-to-sup operator norm of the logit-difference Jacobian, the latter
/// estimated by power iteration on the squared map (20 iterations).
pub fn epsilon_first_order(
    fp: &CompiledModel,
    quant: &CompiledModel,
    point: &[f64],
    rho: f64,
) -> Result<f64> {
    let gf = fp.logits(point);
    let gq = quant.logits(point);
    let bias = linf_norm(&gf.iter().zip(&gq).map(|(a, b)| b - a).collect::<Vec<f64>>());
    if rho == 0.0 {
        return Ok(bias);
    }
    let classes = gf.len();
    let d = point.len();
    // Rows of the Jacobian difference, one per class logit.
    let mut m = Mat::zeros(classes, d);
    for c in 0..classes {
        let gq_row = quant.logit_input_grad(point, c);
        let gf_row = fp.logit_input_grad(point, c);
        for j in 0..d {
            m.data[c * d + j] = gq_row[j] - gf_row[j];
        }
    }
    // Power iteration on M M^T.
    let mut v = vec![1.0 / (classes as f64).sqrt(); classes];
    let mut sigma2 = 0.0;
    for _ in 0..20 {
        // w = M^T v; z = M w.
        let mut w = vec![0.0; d];
        for c in 0..classes {
            let row = m.row(c);
            for j in 0..d {
                w[j] += v[c] * row[j];
            }
        }
        let mut z = vec![0.0; classes];
        for c in 0..classes {
            z[c] = dot(m.row(c), &w);
        }
        let nz = l2_norm(&z);
        if nz < 1e-300 {
            sigma2 = 0.0;
            break;
        }
        sigma2 = nz;
        for c in 0..classes {
            v[c] = z[c] / nz;
        }
    }
    Ok(bias + rho * sigma2.sqrt())
}

/// Fraction of points whose fp margin is within twice the estimated
/// perturbation.
pub fn risk_fraction(margins: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if margins.len() != eps_hat.len() {
        return Err(CfqError::DimensionMismatch {
            expected: margins.len(),
            got: eps_hat.len(),
        });
    }
    if margins.is_empty() {
        return Ok(0.0);
    }
    let hits = margins.iter().zip(eps_hat).filter(|(m, e)| **m <= 2.0 * **e).count();
    Ok(hits as f64 / margins.len() as f64)
}

/// Sorted margins with empirical CDF levels, ready for CSV emission.
pub fn margin_distribution(
    model: &CompiledModel,
    points: &[Vec<f64>],
    y_tgt: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut margins: Vec<f64> = points
        .iter()
        .map(|u| model.margin(u, y_tgt))
        .collect::<Result<_>>()?;
    margins.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = margins.len();
    Ok(margins
        .into_iter()
        .enumerate()
        .map(|(i, m)| (m, (i + 1) as f64 / n as f64))
        .collect())
}

// ── Margin-transfer checks ──────────────────────────────────────────────

/// Whether the sufficient condition held: margin above twice epsilon must
/// imply the quantized argmax hits the target.
pub fn margin_transfer_violated(
    logits_fp: &[f64],
    logits_q: &[f64],
    y_tgt: usize,
    eps: f64,
) -> bool {
    let m = target_margin(logits_fp, y_tgt).expect("valid target");
    if m > 2.0 * eps {
        argmax(logits_q) != y_tgt
    } else {
        false
    }
}

/// The adversarial perturbation attaining the transfer bound: subtract eps
/// from the target logit, add eps to the runner-up.
pub fn adversarial_perturbation(logits: &[f64], y_tgt: usize, eps: f64) -> Vec<f64> {
    let mut out = logits.to_vec();
    let mut runner = usize::MAX;
    let mut best = f64::NEG_INFINITY;
    for (c, &v) in logits.iter().enumerate() {
        if c != y_tgt && v > best {
            best = v;
            runner = c;
        }
    }
    out[y_tgt] -= eps;
    out[runner] += eps;
    out
}

// ── Report assembly ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricConfig {
    pub tau_supp: f64,
    pub eps: f64,
    pub rho: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            tau_supp: DEFAULT_TAU_SUPP,
            eps: DEFAULT_EPS,
            rho: DEFAULT_RHO,
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub accuracy_fp: f64,
    pub accuracy_q: f64,
    pub vd_target_class: Ratio,
    pub vd_label_mismatch: Ratio,
    pub crg: MeanStat,
    pub feasibility: FeasibilityTransitions,
    pub dirsim: MeanStat,
    pub dirsim_degenerate: usize,
    pub act_overlap: MeanStat,
    pub frr_fp: Ratio,
    pub frr_q: Ratio,
    pub subgroups: SubgroupSummary,
    pub eps_q95: f64,
    pub eps_max: f64,
    pub risk_fraction: f64,
    /// (margin, cdf) pairs of fp margins at fp recourse points.
    pub margin_cdf: Vec<(f64, f64)>,
    pub eligible: usize,
}

/// Full evaluation of one (reference, deployed) pair on a dataset split.
pub fn stability_report(
    pair: &ModelPair,
    data: &Dataset,
    schema: &DatasetSchema,
    cost: &CostSpec,
    solver: &SolverConfig,
    metric_cfg: &MetricConfig,
) -> Result<StabilityReport> {
    let pairs = evaluate_pairs(pair, data, schema, cost, solver)?;
    report_from_pairs(pair, data, schema, cost, solver, metric_cfg, &pairs)
}

/// Assemble the report from already-solved pairs.
pub fn report_from_pairs(
    pair: &ModelPair,
    data: &Dataset,
    schema: &DatasetSchema,
    cost: &CostSpec,
    solver: &SolverConfig,
    metric_cfg: &MetricConfig,
    pairs: &PairedRecourse,
) -> Result<StabilityReport> {
    let (vd_t, vd_m) = validity_drop(pairs);
    let (crg, feasibility) = recourse_gap(pairs, metric_cfg.eps);
    let (dirsim, degenerate) = direction_similarity(pairs, metric_cfg.eps);
    let overlap = action_overlap(pairs, metric_cfg.tau_supp, metric_cfg.eps);
    let frr_fp = feasible_recourse_rate(&pair.fp, data, schema, cost, solver)?;
    let frr_q = feasible_recourse_rate(&pair.quant, data, schema, cost, solver)?;
    let subgroups = subgroup_slices(pairs, metric_cfg.eps);

    let ok: Vec<&PairedExample> =
        pairs.examples.iter().filter(|e| e.fp.feasible).collect();
    let points: Vec<Vec<f64>> = ok.iter().map(|e| e.recourse_point.clone()).collect();
    let margins: Vec<f64> = ok.iter().map(|e| e.fp_margin_at_fp_point).collect();
    let eps_hat = epsilon_monte_carlo(
        &pair.fp,
        &pair.quant,
        &points,
        metric_cfg.rho,
        metric_cfg.mc_samples,
        metric_cfg.seed,
    )?;
    let (eps_q95, eps_max) = epsilon_aggregates(&eps_hat);
    let risk = risk_fraction(&margins, &eps_hat)?;
    let mut sorted_margins = margins.clone();
    sorted_margins.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted_margins.len().max(1);
    let margin_cdf = sorted_margins
        .into_iter()
        .enumerate()
        .map(|(i, m)| (m, (i + 1) as f64 / n as f64))
        .collect();

    Ok(StabilityReport {
        accuracy_fp: pair.fp.accuracy(&data.rows, &data.labels),
        accuracy_q: pair.quant.accuracy(&data.rows, &data.labels),
        vd_target_class: vd_t,
        vd_label_mismatch: vd_m,
        crg,
        feasibility,
        dirsim,
        dirsim_degenerate: degenerate,
        act_overlap: overlap,
        frr_fp,
        frr_q,
        subgroups,
        eps_q95,
        eps_max,
        risk_fraction: risk,
        margin_cdf,
        eligible: pairs.eligible,
    })
}
