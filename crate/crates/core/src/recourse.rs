//! Constrained recourse generation.
//!
//! The action set binds an input to its actionability schema: immutable
//! coordinates, box bounds on the post-action point, categorical validity,
//! and a sparsity budget counted in action units (a one-hot group is one
//! unit). Projection applies those families in a fixed order. The solver is
//! projected gradient descent on target cross-entropy; a brute-force
//! enumerator over discretized actions serves as the exact oracle for linear
//! models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{action_cost, standard_normal, CostSpec, DatasetSchema, FeatureKind};
use crate::error::{CfqError, Result};
use crate::nn::CompiledModel;

/// One actionable unit: a scalar coordinate or a whole one-hot group.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Unit {
    Scalar(usize),
    Group(usize),
}

/// Action set for one input under one schema.
pub struct ActionSet<'a> {
    pub schema: &'a DatasetSchema,
    pub x: &'a [f64],
    units: Vec<Unit>,
}

impl<'a> ActionSet<'a> {
    pub fn new(schema: &'a DatasetSchema, x: &'a [f64]) -> Result<Self> {
        if x.len() != schema.dim() {
            return Err(CfqError::DimensionMismatch { expected: schema.dim(), got: x.len() });
        }
        let mut units = Vec::new();
        let mut group_seen = vec![false; schema.onehot_groups.len()];
        for j in 0..schema.dim() {
            match &schema.feature_kinds[j] {
                FeatureKind::OneHot(g) => {
                    if !group_seen[*g] && !group_immutable(schema, *g) {
                        group_seen[*g] = true;
                        units.push(Unit::Group(*g));
                    }
                }
                _ => {
                    if !schema.is_immutable(j) {
                        units.push(Unit::Scalar(j));
                    }
                }
            }
        }
        Ok(ActionSet { schema, x, units })
    }

    /// Sequential projection: immutability, box, categorical, sparsity.
    pub fn project(&self, delta: &[f64]) -> Vec<f64> {
        let d = self.schema.dim();
        debug_assert_eq!(delta.len(), d);
        let mut out = delta.to_vec();

        // Immutability.
        for &j in &self.schema.immutable_indices {
            out[j] = 0.0;
        }

        // Box on x + delta, applied in delta space for exact idempotence.
        for j in 0..d {
            let lo = self.schema.lower_bounds[j] - self.x[j];
            let hi = self.schema.upper_bounds[j] - self.x[j];
            out[j] = out[j].clamp(lo.min(0.0), hi.max(0.0));
        }

        // Categorical validity.
        for j in 0..d {
            if let FeatureKind::Ordinal(domain) = &self.schema.feature_kinds[j] {
                if self.schema.is_immutable(j) {
                    continue;
                }
                let target = self.x[j] + out[j];
                let v = nearest_value(domain, target);
                out[j] = v - self.x[j];
            }
        }
        for (g, members) in self.schema.onehot_groups.iter().enumerate() {
            if group_immutable(self.schema, g) {
                continue;
            }
            let mut best = members[0];
            let mut bestv = f64::NEG_INFINITY;
            for &j in members {
                let v = self.x[j] + out[j];
                if v > bestv {
                    bestv = v;
                    best = j;
                }
            }
            for &j in members {
                let one = if j == best { 1.0 } else { 0.0 };
                out[j] = one - self.x[j];
            }
        }

        // Sparsity: keep the top-k units by magnitude, ties to the lowest
        // first coordinate.
        let k = self.schema.sparsity_k;
        let mut active: Vec<(usize, f64)> = Vec::new();
        for (ui, unit) in self.units.iter().enumerate() {
            let mag = self.unit_magnitude(unit, &out);
            if mag > 0.0 {
                active.push((ui, mag));
            }
        }
        if active.len() > k {
            active.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(ui, _) in active.iter().skip(k) {
                self.zero_unit(&self.units[ui], &mut out);
            }
        }
        out
    }

    fn unit_magnitude(&self, unit: &Unit, delta: &[f64]) -> f64 {
        match unit {
            Unit::Scalar(j) => delta[*j].abs(),
            Unit::Group(g) => self.schema.onehot_groups[*g]
                .iter()
                .fold(0.0f64, |m, &j| m.max(delta[j].abs())),
        }
    }

    fn zero_unit(&self, unit: &Unit, delta: &mut [f64]) {
        match unit {
            Unit::Scalar(j) => delta[*j] = 0.0,
            Unit::Group(g) => {
                for &j in &self.schema.onehot_groups[*g] {
                    delta[j] = 0.0;
                }
            }
        }
    }

    /// Number of changed action units.
    pub fn changed_units(&self, delta: &[f64]) -> usize {
        self.units.iter().filter(|u| self.unit_magnitude(u, delta) > 0.0).count()
    }

    /// Check all four constraint families, with a small tolerance on the box.
    pub fn is_feasible(&self, delta: &[f64], tol: f64) -> bool {
        for &j in &self.schema.immutable_indices {
            if delta[j] != 0.0 {
                return false;
            }
        }
        for j in 0..self.schema.dim() {
            let v = self.x[j] + delta[j];
            if v < self.schema.lower_bounds[j] - tol || v > self.schema.upper_bounds[j] + tol {
                return false;
            }
            if let FeatureKind::Ordinal(domain) = &self.schema.feature_kinds[j] {
                if !domain.iter().any(|&d| (d - v).abs() <= tol) {
                    return false;
                }
            }
        }
        for members in &self.schema.onehot_groups {
            let mut sum = 0.0;
            for &j in members {
                let v = self.x[j] + delta[j];
                if (v - 0.0).abs() > tol && (v - 1.0).abs() > tol {
                    return false;
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return false;
            }
        }
        self.changed_units(delta) <= self.schema.sparsity_k
    }
}

fn group_immutable(schema: &DatasetSchema, g: usize) -> bool {
    schema.onehot_groups[g].iter().any(|&j| schema.is_immutable(j))
}

fn nearest_value(domain: &[f64], target: f64) -> f64 {
    let mut best = domain[0];
    let mut bestd = (domain[0] - target).abs();
    for &v in &domain[1..] {
        let d = (v - target).abs();
        if d < bestd {
            bestd = d;
            best = v;
        }
    }
    best
}

// ── Solver configuration and result ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateLoss {
    TargetCrossEntropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub surrogate: SurrogateLoss,
    /// Success requires target margin strictly above this slack.
    pub margin_threshold: f64,
    /// Teacher actions are constants to any outer optimization.
    pub stop_gradient: bool,
    /// Gaussian noise scale applied to the final teacher action.
    pub teacher_noise: f64,
    /// Cost refinement (ray bisection + per-coordinate shrink) after success.
    pub refine: bool,
    /// Stop the projected-gradient recursion at the first success.
    #[serde(default)]
    pub early_stop: bool,
}

impl SolverConfig {
    /// Training-time teacher: few steps, no refinement.
    pub fn teacher(steps: usize) -> Self {
        SolverConfig {
            steps,
            step_size: 0.1,
            restarts: 1,
            surrogate: SurrogateLoss::TargetCrossEntropy,
            margin_threshold: 1e-6,
            stop_gradient: true,
            teacher_noise: 0.0,
            refine: false,
            early_stop: false,
        }
    }

    /// Evaluation-grade solver.
    pub fn evaluation() -> Self {
        SolverConfig {
            steps: 200,
            step_size: 0.1,
            restarts: 5,
            surrogate: SurrogateLoss::TargetCrossEntropy,
            margin_threshold: 1e-6,
            stop_gradient: true,
            teacher_noise: 0.0,
            refine: true,
            early_stop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CfqError::invalid("solver needs at least one step"));
        }
        if self.step_size <= 0.0 {
            return Err(CfqError::invalid("step size must be positive"));
        }
        if self.teacher_noise < 0.0 {
            return Err(CfqError::invalid("teacher noise must be nonnegative"));
        }
        Ok(())
    }
}

/// Outcome of one recourse solve. The achieved label is recomputed from the
/// queried model, never cached across models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecourseResult {
    pub delta: Vec<f64>,
    pub achieved_label: usize,
    pub cost: f64,
    pub feasible: bool,
    pub steps_used: usize,
    pub converged: bool,
}

/// K-step projected gradient descent on target cross-entropy.
///
/// Every iterate is projected onto the action set; among successful iterates
/// (margin above the threshold) the lowest-cost one wins. With `refine`, a
/// ray bisection toward zero and a greedy per-unit shrink reduce the cost
/// further. `noise_rng` feeds the optional teacher perturbation; restarts
/// beyond the first draw their starts from it as well.
pub fn pgd_recourse(
    model: &CompiledModel,
    x: &[f64],
    y_tgt: usize,
    aset: &ActionSet,
    cost: &CostSpec,
    cfg: &SolverConfig,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<RecourseResult> {
    cfg.validate()?;
    if y_tgt >= model.num_classes() {
        return Err(CfqError::invalid(format!("target class {y_tgt} out of range")));
    }
    let d = x.len();
    let mut local_rng = ChaCha8Rng::seed_from_u64_compat(0xC0FFEE);
    let mut best: Option<(Vec<f64>, f64, usize)> = None;

    let success = |delta: &[f64]| -> Result<bool> {
        let mut u = vec![0.0; d];
        for j in 0..d {
            u[j] = x[j] + delta[j];
        }
        Ok(model.margin(&u, y_tgt)? > cfg.margin_threshold)
    };

    let consider =
        |delta: &[f64], step: usize, best: &mut Option<(Vec<f64>, f64, usize)>| -> Result<()> {
            if success(delta)? {
                let c = action_cost(delta, cost)?;
                match best {
                    Some((_, bc, _)) if *bc <= c => {}
                    _ => *best = Some((delta.to_vec(), c, step)),
                }
            }
            Ok(())
        };

    for restart in 0..cfg.restarts.max(1) {
        let mut delta = vec![0.0; d];
        if restart > 0 {
            for (j, dj) in delta.iter_mut().enumerate() {
                let lo = aset.schema.lower_bounds[j] - x[j];
                let hi = aset.schema.upper_bounds[j] - x[j];
                let (lo, hi) = (lo.max(-2.0), hi.min(2.0));
                if lo < hi {
                    *dj = local_rng.gen_range(lo..hi) * 0.3;
                }
            }
            delta = aset.project(&delta);
        }
        consider(&delta, 0, &mut best)?;
        if cfg.early_stop && best.is_some() {
            break;
        }
        for t in 0..cfg.steps {
            let mut u = vec![0.0; d];
            for j in 0..d {
                u[j] = x[j] + delta[j];
            }
            let (_, grad) = model.ce_and_input_grad(&u, y_tgt);
            for j in 0..d {
                delta[j] -= cfg.step_size * grad[j];
            }
            delta = aset.project(&delta);
            consider(&delta, t + 1, &mut best)?;
            if cfg.early_stop && best.is_some() {
                break;
            }
        }
        if cfg.early_stop && best.is_some() {
            break;
        }
    }

    let mut result = match best {
        None => {
            let achieved = model.predict(x);
            return Ok(RecourseResult {
                delta: vec![0.0; d],
                achieved_label: achieved,
                cost: 0.0,
                feasible: false,
                steps_used: cfg.steps,
                converged: false,
            });
        }
        Some((delta, c, step)) => (delta, c, step),
    };

    if cfg.refine && result.1 > 0.0 {
        refine_cost(model, x, y_tgt, aset, cost, cfg, &mut result.0)?;
        result.1 = action_cost(&result.0, cost)?;
    }

    // Optional teacher perturbation, re-projected into the action set.
    if cfg.teacher_noise > 0.0 {
        if let Some(rng) = noise_rng {
            let mut noisy = result.0.clone();
            for v in noisy.iter_mut() {
                *v += cfg.teacher_noise * standard_normal(rng);
            }
            result.0 = aset.project(&noisy);
            result.1 = action_cost(&result.0, cost)?;
        }
    }

    let mut u = vec![0.0; d];
    for j in 0..d {
        u[j] = x[j] + result.0[j];
    }
    let achieved = model.predict(&u);
    let feasible = aset.is_feasible(&result.0, 1e-9);
    let converged = result.2 < cfg.steps;
    Ok(RecourseResult {
        delta: result.0,
        achieved_label: achieved,
        cost: result.1,
        feasible,
        steps_used: result.2,
        converged,
    })
}

/// Shrink a successful action toward zero without losing success.
fn refine_cost(
    model: &CompiledModel,
    x: &[f64],
    y_tgt: usize,
    aset: &ActionSet,
    cost: &CostSpec,
    cfg: &SolverConfig,
    delta: &mut Vec<f64>,
) -> Result<()> {
    let d = x.len();
    let ok = |delta: &[f64]| -> bool {
        let mut u = vec![0.0; d];
        for j in 0..d {
            u[j] = x[j] + delta[j];
        }
        model.margin(&u, y_tgt).map(|m| m > cfg.margin_threshold).unwrap_or(false)
            && aset.is_feasible(delta, 1e-9)
    };

    // Ray bisection toward zero: smallest scale that keeps success.
    let scaled_ok = |t: f64, base: &[f64]| -> (Vec<f64>, bool) {
        let cand: Vec<f64> = base.iter().map(|v| v * t).collect();
        let cand = aset.project(&cand);
        let good = ok(&cand);
        (cand, good)
    };
    let base = delta.clone();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let (_, good) = scaled_ok(mid, &base);
        if good {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (cand, good) = scaled_ok(hi, &base);
    if good && action_cost(&cand, cost)? <= action_cost(delta, cost)? {
        *delta = cand;
    }

    // Greedy unit drop: try zeroing whole units, most expensive first.
    let mut order: Vec<(usize, f64)> = Vec::new();
    for (ui, unit) in aset.units.iter().enumerate() {
        let mut probe = delta.clone();
        aset.zero_unit(unit, &mut probe);
        let saved = action_cost(delta, cost)? - action_cost(&probe, cost)?;
        if saved > 0.0 {
            order.push((ui, saved));
        }
    }
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (ui, _) in order {
        let mut probe = delta.clone();
        aset.zero_unit(&aset.units[ui], &mut probe);
        if ok(&probe) {
            *delta = probe;
        }
    }

    // Per-coordinate bisection shrink on continuous coordinates.
    for _ in 0..2 {
        for j in 0..d {
            if delta[j] == 0.0 {
                continue;
            }
            if !matches!(aset.schema.feature_kinds[j], FeatureKind::Continuous) {
                continue;
            }
            let full = delta[j];
            let mut probe = delta.clone();
            probe[j] = 0.0;
            if ok(&probe) {
                *delta = probe;
                continue;
            }
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                let mut probe = delta.clone();
                probe[j] = full * mid;
                if ok(&probe) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let mut probe = delta.clone();
            probe[j] = full * hi;
            if ok(&probe) {
                *delta = probe;
            }
        }
    }
    Ok(())
}

// ── Exact oracle for binary linear models ───────────────────────────────

/// Minimum-cost feasible action achieving margin above the threshold for the
/// binary linear model with logits (0, w.x + b0) and target class 1.
///
/// Brute force: enumerate supports of at most k units; grid continuous
/// coordinates (one coordinate per support is solved exactly from the linear
/// constraint), enumerate ordinal domains and category switches. Test oracle
/// only; limited to d <= 8.
pub fn exact_linear_recourse(
    w: &[f64],
    b0: f64,
    x: &[f64],
    aset: &ActionSet,
    cost: &CostSpec,
    margin_threshold: f64,
    resolution: usize,
) -> Result<RecourseResult> {
    let d = x.len();
    if d > 8 {
        return Err(CfqError::invalid("exact oracle limited to d <= 8"));
    }
    if w.len() != d {
        return Err(CfqError::DimensionMismatch { expected: d, got: w.len() });
    }
    let margin0: f64 = crate::mat::dot(w, x) + b0;
    // Strictly exceed the threshold by a hair so solver success semantics match.
    let need = margin_threshold + 1e-9 - margin0;
    if need <= 0.0 {
        return Ok(RecourseResult {
            delta: vec![0.0; d],
            achieved_label: 1,
            cost: 0.0,
            feasible: true,
            steps_used: 0,
            converged: true,
        });
    }

    let units = &aset.units;
    let k = aset.schema.sparsity_k.min(units.len());
    let mut best: Option<(Vec<f64>, f64)> = None;

    // Candidate values per unit (delta contributions), excluding zero.
    let unit_choices = |unit: &Unit| -> Vec<Vec<(usize, f64)>> {
        match unit {
            Unit::Scalar(j) => {
                let lo = aset.schema.lower_bounds[*j] - x[*j];
                let hi = aset.schema.upper_bounds[*j] - x[*j];
                match &aset.schema.feature_kinds[*j] {
                    FeatureKind::Ordinal(domain) => domain
                        .iter()
                        .map(|&v| v - x[*j])
                        .filter(|&dv| dv != 0.0 && dv >= lo - 1e-12 && dv <= hi + 1e-12)
                        .map(|dv| vec![(*j, dv)])
                        .collect(),
                    _ => {
                        let r = resolution.max(3);
                        (0..r)
                            .map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64)
                            .filter(|&dv| dv != 0.0)
                            .map(|dv| vec![(*j, dv)])
                            .collect()
                    }
                }
            }
            Unit::Group(g) => {
                let members = &aset.schema.onehot_groups[*g];
                let current = members
                    .iter()
                    .position(|&j| x[j] > 0.5)
                    .unwrap_or(0);
                let mut out = Vec::new();
                for (c, &jc) in members.iter().enumerate() {
                    if c == current {
                        continue;
                    }
                    let mut sw: Vec<(usize, f64)> = Vec::new();
                    for &j in members {
                        let one = if j == jc { 1.0 } else { 0.0 };
                        let dv = one - x[j];
                        if dv != 0.0 {
                            sw.push((j, dv));
                        }
                    }
                    out.push(sw);
                }
                out
            }
        }
    };

    // Enumerate supports of size up to k.
    let mut supports: Vec<Vec<usize>> = vec![vec![]];
    for size in 1..=k {
        let mut stack = vec![(0usize, Vec::<usize>::with_capacity(size))];
        while let Some((start, cur)) = stack.pop() {
            if cur.len() == size {
                supports.push(cur);
                continue;
            }
            for ui in start..units.len() {
                let mut nxt = cur.clone();
                nxt.push(ui);
                stack.push((ui + 1, nxt));
            }
        }
    }

    for support in &supports {
        // Pick each continuous scalar in the support in turn as the exactly
        // solved coordinate; grid the rest. Also try the all-grid variant to
        // cover supports without continuous coordinates.
        let mut solve_slots: Vec<Option<usize>> = vec![None];
        for (si, &ui) in support.iter().enumerate() {
            if let Unit::Scalar(j) = units[ui] {
                if matches!(aset.schema.feature_kinds[j], FeatureKind::Continuous) {
                    solve_slots.push(Some(si));
                }
            }
        }
        for solve_slot in solve_slots {
            let choice_sets: Vec<Vec<Vec<(usize, f64)>>> = support
                .iter()
                .enumerate()
                .map(|(si, &ui)| {
                    if Some(si) == solve_slot {
                        vec![vec![]] // placeholder, solved exactly below
                    } else {
                        unit_choices(&units[ui])
                    }
                })
                .collect();
            if choice_sets.iter().any(|c| c.is_empty()) {
                continue;
            }
            let mut idx = vec![0usize; choice_sets.len()];
            loop {
                let mut delta = vec![0.0; d];
                for (si, sel) in idx.iter().enumerate() {
                    for &(j, dv) in &choice_sets[si][*sel] {
                        delta[j] = dv;
                    }
                }
                let mut valid = true;
                if let Some(si) = solve_slot {
                    let ui = support[si];
                    if let Unit::Scalar(j) = units[ui] {
                        let rest: f64 = crate::mat::dot(w, &delta);
                        let r = need - rest;
                        let dj = if r <= 0.0 {
                            0.0
                        } else if w[j].abs() < 1e-15 {
                            f64::INFINITY
                        } else {
                            r / w[j]
                        };
                        let lo = aset.schema.lower_bounds[j] - x[j];
                        let hi = aset.schema.upper_bounds[j] - x[j];
                        if dj.is_finite() && dj >= lo - 1e-12 && dj <= hi + 1e-12 {
                            delta[j] = dj;
                        } else {
                            valid = false;
                        }
                    }
                } else {
                    valid = crate::mat::dot(w, &delta) >= need;
                }
                if valid {
                    let c = action_cost(&delta, cost)?;
                    match &best {
                        Some((_, bc)) if *bc <= c => {}
                        _ => best = Some((delta, c)),
                    }
                }
                // Advance the mixed-radix index.
                let mut pos = 0;
                loop {
                    if pos == idx.len() {
                        break;
                    }
                    idx[pos] += 1;
                    if idx[pos] < choice_sets[pos].len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                }
                if pos == idx.len() {
                    break;
                }
                if idx.iter().all(|&i| i == 0) {
                    break;
                }
            }
        }
    }

    match best {
        Some((delta, c)) => {
            let mut u = vec![0.0; d];
            for j in 0..d {
                u[j] = x[j] + delta[j];
            }
            let achieved = if crate::mat::dot(w, &u) + b0 > 0.0 { 1 } else { 0 };
            Ok(RecourseResult {
                delta,
                achieved_label: achieved,
                cost: c,
                feasible: true,
                steps_used: 0,
                converged: true,
            })
        }
        None => Ok(RecourseResult {
            delta: vec![0.0; d],
            achieved_label: 0,
            cost: 0.0,
            feasible: false,
            steps_used: 0,
            converged: false,
        }),
    }
}

// Seed helper kept local so restart draws stay reproducible and independent
// of the caller's streams.
trait SeedCompat {
    fn seed_from_u64_compat(seed: u64) -> Self;
}

impl SeedCompat for ChaCha8Rng {
    fn seed_from_u64_compat(seed: u64) -> Self {
        <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CostNorm, FavorableLabel};
    use crate::nn::{ForwardMode, ModelGraph};

    fn plain_schema(d: usize, k: usize) -> DatasetSchema {
        DatasetSchema {
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
            feature_kinds: vec![FeatureKind::Continuous; d],
            immutable_indices: vec![],
            lower_bounds: vec![-10.0; d],
            upper_bounds: vec![10.0; d],
            sparsity_k: k,
            onehot_groups: vec![],
            favorable: FavorableLabel::FixedClass(1),
            num_classes: 2,
            subgroup_column: None,
        }
    }

    #[test]
    fn projection_zeroes_immutables() {
        let mut schema = plain_schema(3, 3);
        schema.immutable_indices = vec![1];
        let x = [0.0, 0.0, 0.0];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let out = aset.project(&[0.5, 0.7, -0.2]);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn projection_clamps_to_box() {
        let mut schema = plain_schema(1, 1);
        schema.upper_bounds = vec![1.0];
        let x = [0.9];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let out = aset.project(&[0.5]);
        assert!((out[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn projection_keeps_top_k_by_magnitude() {
        let schema = plain_schema(4, 2);
        let x = [0.0; 4];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let out = aset.project(&[0.5, 0.1, -0.3, 0.2]);
        assert_eq!(out, vec![0.5, 0.0, -0.3, 0.0]);
    }

    #[test]
    fn projection_is_idempotent_and_feasible_randomized() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..2000 {
            let d = rng.gen_range(2usize..8);
            let mut schema = plain_schema(d, rng.gen_range(1..=d));
            for j in 0..d {
                let lo = rng.gen_range(-2.0..-0.1);
                let hi = rng.gen_range(0.1..2.0);
                schema.lower_bounds[j] = lo;
                schema.upper_bounds[j] = hi;
                if rng.gen_bool(0.2) {
                    schema.immutable_indices.push(j);
                }
            }
            schema.immutable_indices.dedup();
            // Ordinal feature now and then.
            if d >= 3 && rng.gen_bool(0.5) {
                schema.feature_kinds[d - 1] = FeatureKind::Ordinal(vec![-1.0, 0.0, 1.0]);
                schema.lower_bounds[d - 1] = -1.0;
                schema.upper_bounds[d - 1] = 1.0;
            }
            let x: Vec<f64> = (0..d)
                .map(|j| match &schema.feature_kinds[j] {
                    FeatureKind::Ordinal(dom) => dom[rng.gen_range(0..dom.len())],
                    _ => rng.gen_range(schema.lower_bounds[j]..schema.upper_bounds[j]),
                })
                .collect();
            let aset = ActionSet::new(&schema, &x).unwrap();
            let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p1 = aset.project(&delta);
            let p2 = aset.project(&p1);
            assert_eq!(p1, p2, "trial {trial}: projection not idempotent");
            assert!(aset.is_feasible(&p1, 1e-9), "trial {trial}: infeasible output");
        }
    }

    #[test]
    fn pgd_on_one_dimensional_linear_model() {
        // Logit 3x, x = -0.5: minimal action reaching margin > thr is
        // 0.5 + thr/3; the box cap at 1.5 bounds the step overshoot.
        let model = ModelGraph::linear_binary(&[3.0], 0.0);
        let cm = CompiledModel::compile(&model, ForwardMode::Fp).unwrap();
        let mut schema = plain_schema(1, 1);
        schema.lower_bounds = vec![-1.0];
        schema.upper_bounds = vec![1.0];
        let x = [-0.5];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let cost = CostSpec::uniform(1, CostNorm::L1);
        let mut cfg = SolverConfig::evaluation();
        cfg.steps = 50;
        cfg.step_size = 0.2;
        let res = pgd_recourse(&cm, &x, 1, &aset, &cost, &cfg, None).unwrap();
        assert!(res.feasible);
        assert!(res.delta[0] > 0.5 && res.delta[0] <= 1.5);
        let exact = 0.5 + cfg.margin_threshold / 3.0;
        assert!(
            (res.cost - exact).abs() / exact < 0.10,
            "cost {} vs exact {exact}",
            res.cost
        );
    }

    #[test]
    fn already_on_target_is_a_noop() {
        let model = ModelGraph::linear_binary(&[2.0], 0.0);
        let cm = CompiledModel::compile(&model, ForwardMode::Fp).unwrap();
        let schema = plain_schema(1, 1);
        let x = [3.0];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let cost = CostSpec::uniform(1, CostNorm::L1);
        let cfg = SolverConfig::teacher(3);
        let res = pgd_recourse(&cm, &x, 1, &aset, &cost, &cfg, None).unwrap();
        assert!(res.feasible);
        assert_eq!(res.delta, vec![0.0]);
        assert_eq!(res.steps_used, 0);
        assert!(res.converged);
    }

    #[test]
    fn fully_immutable_input_is_infeasible() {
        let model = ModelGraph::linear_binary(&[1.0, 1.0], 0.0);
        let cm = CompiledModel::compile(&model, ForwardMode::Fp).unwrap();
        let mut schema = plain_schema(2, 1);
        schema.immutable_indices = vec![0, 1];
        let x = [-1.0, -1.0];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let cost = CostSpec::uniform(2, CostNorm::L1);
        let cfg = SolverConfig::teacher(5);
        let res = pgd_recourse(&cm, &x, 1, &aset, &cost, &cfg, None).unwrap();
        assert!(!res.feasible);
        assert_eq!(res.delta, vec![0.0, 0.0]);
    }

    #[test]
    fn exact_oracle_unconstrained_split() {
        // w = (1,1), x = (-1,0): any split with delta1+delta2 = 1 has L1
        // cost 1.
        let schema = plain_schema(2, 2);
        let x = [-1.0, 0.0];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let cost = CostSpec::uniform(2, CostNorm::L1);
        let res =
            exact_linear_recourse(&[1.0, 1.0], 0.0, &x, &aset, &cost, 1e-6, 41).unwrap();
        assert!(res.feasible);
        assert!((res.cost - 1.0).abs() < 1e-3, "cost {}", res.cost);
    }

    #[test]
    fn exact_oracle_noop_and_infeasible() {
        let schema = plain_schema(2, 2);
        let x = [1.0, 0.0];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let cost = CostSpec::uniform(2, CostNorm::L1);
        let res = exact_linear_recourse(&[1.0, 0.0], 0.0, &x, &aset, &cost, 1e-6, 21).unwrap();
        assert!(res.feasible);
        assert_eq!(res.cost, 0.0);

        let mut schema = plain_schema(2, 2);
        schema.immutable_indices = vec![0];
        let x = [-1.0, 0.0];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let res = exact_linear_recourse(&[1.0, 0.0], 0.0, &x, &aset, &cost, 1e-6, 21).unwrap();
        assert!(!res.feasible);
    }

    #[test]
    fn pgd_loss_is_monotone_on_convex_instances() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = rng.gen_range(2usize..5);
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let model = ModelGraph::linear_binary(&w, rng.gen_range(-0.5..0.5));
            let cm = CompiledModel::compile(&model, ForwardMode::Fp).unwrap();
            let schema = plain_schema(d, d); // k = d: sparsity off, convex set
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let aset = ActionSet::new(&schema, &x).unwrap();
            let wnorm: f64 = w.iter().map(|v| v * v).sum();
            let alpha = 1.0 / wnorm.max(1e-6);
            let mut delta = vec![0.0; d];
            let mut prev = f64::INFINITY;
            for _ in 0..100 {
                let u: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let (loss, grad) = cm.ce_and_input_grad(&u, 1);
                assert!(loss <= prev + 1e-10, "loss increased: {prev} -> {loss}");
                prev = loss;
                for j in 0..d {
                    delta[j] -= alpha * grad[j];
                }
                delta = aset.project(&delta);
            }
        }
    }

    #[test]
    fn zero_noise_reproduces_clean_teacher() {
        use rand::SeedableRng;
        let model = ModelGraph::linear_binary(&[1.5, -0.5], 0.2);
        let cm = CompiledModel::compile(&model, ForwardMode::Fp).unwrap();
        let schema = plain_schema(2, 2);
        let x = [-1.0, 0.4];
        let aset = ActionSet::new(&schema, &x).unwrap();
        let cost = CostSpec::uniform(2, CostNorm::L1);
        let clean = SolverConfig::teacher(3);
        let mut zero_noise = SolverConfig::teacher(3);
        zero_noise.teacher_noise = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = pgd_recourse(&cm, &x, 1, &aset, &cost, &clean, None).unwrap();
        let b = pgd_recourse(&cm, &x, 1, &aset, &cost, &zero_noise, Some(&mut rng)).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.cost, b.cost);
    }

    #[test]
    fn onehot_group_projection_snaps_to_simplex() {
        let mut schema = plain_schema(4, 2);
        schema.feature_kinds = vec![
            FeatureKind::Continuous,
            FeatureKind::OneHot(0),
            FeatureKind::OneHot(0),
            FeatureKind::OneHot(0),
        ];
        schema.onehot_groups = vec![vec![1, 2, 3]];
        schema.lower_bounds = vec![-5.0, 0.0, 0.0, 0.0];
        schema.upper_bounds = vec![5.0, 1.0, 1.0, 1.0];
        let x = [0.0, 1.0, 0.0, 0.0];
        let aset = ActionSet::new(&schema, &x).unwrap();
        // Push mass toward the third category.
        let out = aset.project(&[0.0, -0.2, 0.1, 0.9]);
        let u: Vec<f64> = x.iter().zip(&out).map(|(a, b)| a + b).collect();
        assert_eq!(&u[1..], &[0.0, 0.0, 1.0]);
        // The group switch counts as one unit.
        assert_eq!(aset.changed_units(&out), 1);
    }
}
