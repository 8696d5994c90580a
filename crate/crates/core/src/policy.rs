//! Differentiable layer-wise bit selection under a global budget.
//!
//! Each layer carries categorical logits over a candidate bit set. A
//! Gumbel-Softmax relaxation yields a simplex vector per layer; the forward
//! pass takes the hard argmax while gradients flow through the soft vector.
//! Costs are accounted two ways: the relaxed expected bitwidth feeds the
//! training-time budget penalty, the hard selection feeds reported costs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CfqError, Result};

/// Default candidate bit set.
pub const DEFAULT_BITS: [u32; 4] = [2, 3, 4, 8];

/// Budget accounting mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Sum over layers of n_l * b_l.
    ParamWeighted,
    /// Sum over layers of MACs_l * b_w * b_a.
    Bops,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub total: f64,
    pub mode: BudgetMode,
    /// Penalty weight multiplying the hinge in the training objective.
    pub lambda: f64,
}

impl BudgetSpec {
    pub fn param_weighted(total: f64, lambda: f64) -> Result<Self> {
        if total <= 0.0 {
            return Err(CfqError::invalid("budget must be positive"));
        }
        Ok(BudgetSpec { total, mode: BudgetMode::ParamWeighted, lambda })
    }
}

/// Per-layer categorical distribution over candidate bitwidths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantPolicy {
    /// Candidate bits, ascending.
    pub bits: Vec<u32>,
    /// Per-layer logits (log pi).
    pub logits: Vec<Vec<f64>>,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// When false, noise draws are zeroed (deterministic annealed softmax).
    pub stochastic: bool,
}

impl QuantPolicy {
    pub fn uniform(num_layers: usize, bits: &[u32], tau: f64) -> Result<Self> {
        let mut sorted = bits.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != bits.len() || sorted != bits {
            return Err(CfqError::invalid("candidate bits must be sorted and distinct"));
        }
        if tau <= 0.0 {
            return Err(CfqError::invalid("temperature must be positive"));
        }
        Ok(QuantPolicy {
            bits: bits.to_vec(),
            logits: vec![vec![0.0; bits.len()]; num_layers],
            tau,
            stochastic: true,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.logits.len()
    }

    /// Draw one Gumbel(0,1) noise vector per layer; zeros in deterministic mode.
    pub fn draw_noise(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..self.num_layers())
            .map(|_| {
                (0..self.bits.len())
                    .map(|_| {
                        if self.stochastic {
                            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                            -(-u.ln()).ln()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Relaxed per-layer samples for the given noise.
    pub fn sample_all(&self, noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.logits
            .iter()
            .zip(noise)
            .map(|(lg, nz)| gumbel_softmax_sample(lg, self.tau, nz))
            .collect()
    }

    /// Discretize to per-layer bits by argmax of the logits; ties take the
    /// lowest candidate.
    pub fn discretize(&self) -> Vec<u32> {
        self.logits.iter().map(|lg| self.bits[argmax_lowest(lg)]).collect()
    }

    /// Index form of `discretize`.
    pub fn discretize_indices(&self) -> Vec<usize> {
        self.logits.iter().map(|lg| argmax_lowest(lg)).collect()
    }
}

pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// softmax((logits + noise) / tau).
pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(CfqError::invalid("temperature must be positive"));
    }
    if logits.len() != noise.len() {
        return Err(CfqError::DimensionMismatch { expected: logits.len(), got: noise.len() });
    }
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    let mx = scaled.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

/// Hard forward selection: the candidate bit at argmax(z). Gradients flow to
/// the logits through the soft vector (see `tape::ste_mix_weights`).
pub fn select_bits_hard(z: &[f64], bits: &[u32]) -> u32 {
    bits[argmax_lowest(z)]
}

/// Expected bitwidth under the relaxed selection vector.
pub fn effective_bits(z: &[f64], bits: &[u32]) -> f64 {
    z.iter().zip(bits).map(|(p, &b)| p * b as f64).sum()
}

/// Parameter-weighted relaxed bit cost: sum_l n_l * effective_bits_l.
pub fn bit_cost_relaxed(zs: &[Vec<f64>], bits: &[u32], param_counts: &[usize]) -> Result<f64> {
    if zs.len() != param_counts.len() {
        return Err(CfqError::DimensionMismatch { expected: param_counts.len(), got: zs.len() });
    }
    Ok(zs
        .iter()
        .zip(param_counts)
        .map(|(z, &n)| n as f64 * effective_bits(z, bits))
        .sum())
}

/// Parameter-weighted hard bit cost: sum_l n_l * b_l.
pub fn bit_cost_hard(selected_bits: &[u32], param_counts: &[usize]) -> Result<f64> {
    if selected_bits.len() != param_counts.len() {
        return Err(CfqError::DimensionMismatch {
            expected: param_counts.len(),
            got: selected_bits.len(),
        });
    }
    Ok(selected_bits.iter().zip(param_counts).map(|(&b, &n)| n as f64 * b as f64).sum())
}

/// Bit-operations proxy: sum_l MACs_l * b_w_l * b_a_l. Pass effective
/// (relaxed) or hard bits per layer for each side; a weights-only setup uses
/// a constant 32.0 for the activation side.
pub fn bops_cost(weight_bits: &[f64], act_bits: &[f64], macs: &[usize]) -> Result<f64> {
    if weight_bits.len() != macs.len() || act_bits.len() != macs.len() {
        return Err(CfqError::DimensionMismatch { expected: macs.len(), got: weight_bits.len() });
    }
    Ok(macs
        .iter()
        .zip(weight_bits.iter().zip(act_bits))
        .map(|(&m, (&bw, &ba))| m as f64 * bw * ba)
        .sum())
}

/// Hinge penalty above the budget: max(0, cost - total).
pub fn budget_penalty(cost: f64, budget: &BudgetSpec) -> f64 {
    (cost - budget.total).max(0.0)
}

/// Exponential temperature schedule from `start` to `end` over `total` steps.
pub fn temperature_at(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return end;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    start * (end / start).powf(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_simplex() {
        let z = gumbel_softmax_sample(&[0.5, 0.5, 0.5, 0.5], 0.7, &[0.0; 4]).unwrap();
        for p in &z {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn peaked_logits_dominate_at_low_temperature() {
        let z = gumbel_softmax_sample(&[10.0, 0.0, 0.0, 0.0], 0.1, &[0.0; 4]).unwrap();
        assert!(z[0] > 0.999);
    }

    #[test]
    fn samples_lie_on_the_simplex() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 6.0
        };
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..4).map(|_| next()).collect();
            let noise: Vec<f64> = (0..4).map(|_| next()).collect();
            let z = gumbel_softmax_sample(&logits, 0.5, &noise).unwrap();
            let s: f64 = z.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(z.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn lower_temperature_concentrates_mass() {
        let logits = [0.3, -0.2, 0.9, 0.1];
        let noise = [0.05, -0.4, 0.2, 0.6];
        let mut prev_max = 0.0;
        for tau in [1.0, 0.1, 0.01] {
            let z = gumbel_softmax_sample(&logits, tau, &noise).unwrap();
            let mx = z.iter().cloned().fold(0.0f64, f64::max);
            assert!(mx >= prev_max - 1e-12, "tau {tau}: {mx} < {prev_max}");
            prev_max = mx;
        }
    }

    #[test]
    fn hard_selection_and_ties() {
        let bits = [2u32, 3, 4, 8];
        assert_eq!(select_bits_hard(&[0.1, 0.7, 0.1, 0.1], &bits), 3);
        assert_eq!(select_bits_hard(&[0.0, 0.0, 0.0, 1.0], &bits), 8);
        assert_eq!(select_bits_hard(&[0.5, 0.5, 0.0, 0.0], &bits), 2);
    }

    #[test]
    fn effective_bits_examples() {
        let bits = [2u32, 3, 4, 8];
        assert!((effective_bits(&[0.25; 4], &bits) - 4.25).abs() < 1e-12);
        assert!((effective_bits(&[0.0, 0.0, 1.0, 0.0], &bits) - 4.0).abs() < 1e-12);
        assert!((effective_bits(&[0.5, 0.0, 0.0, 0.5], &bits) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn bit_cost_examples() {
        assert_eq!(bit_cost_hard(&[4, 8], &[10, 20]).unwrap(), 200.0);
        assert_eq!(bit_cost_hard(&[2, 2], &[5, 5]).unwrap(), 20.0);
        let z = vec![vec![0.25; 4]];
        assert!((bit_cost_relaxed(&z, &[2, 3, 4, 8], &[1]).unwrap() - 4.25).abs() < 1e-12);
        assert!(bit_cost_hard(&[4], &[1, 2]).is_err());
    }

    #[test]
    fn bops_examples() {
        assert_eq!(bops_cost(&[4.0], &[8.0], &[100]).unwrap(), 3200.0);
        assert_eq!(bops_cost(&[4.0], &[8.0], &[0]).unwrap(), 0.0);
        // Weights-only mode fixes the activation side at 32.
        let macs = [7usize, 9];
        let wb = [3.0, 5.0];
        let v = bops_cost(&wb, &[32.0, 32.0], &macs).unwrap();
        let direct: f64 = macs.iter().zip(&wb).map(|(&m, &b)| 32.0 * m as f64 * b).sum();
        assert_eq!(v, direct);
    }

    #[test]
    fn budget_penalty_hinge() {
        let b = BudgetSpec::param_weighted(250.0, 1.0).unwrap();
        assert_eq!(budget_penalty(200.0, &b), 0.0);
        assert_eq!(budget_penalty(300.0, &b), 50.0);
        assert_eq!(budget_penalty(250.0, &b), 0.0);
        assert!(BudgetSpec::param_weighted(0.0, 1.0).is_err());
    }

    #[test]
    fn discretize_examples() {
        let mut p = QuantPolicy::uniform(2, &[2, 3, 4, 8], 1.0).unwrap();
        p.logits[0] = vec![0.0, 0.0, 0.0, 3.0];
        p.logits[1] = vec![0.0, 2.0, 0.0, 0.0];
        assert_eq!(p.discretize(), vec![8, 3]);
        let p = QuantPolicy::uniform(1, &[2, 3, 4, 8], 1.0).unwrap();
        assert_eq!(p.discretize(), vec![2]); // uniform ties to lowest candidate
        let mut p = QuantPolicy::uniform(2, &[2, 3, 4, 8], 1.0).unwrap();
        p.logits[0] = vec![0.0, 5.0, 0.0, 0.0];
        p.logits[1] = vec![0.0, 0.0, 5.0, 0.0];
        assert_eq!(p.discretize(), vec![3, 4]);
    }

    #[test]
    fn hard_forward_matches_soft_argmax() {
        // Straight-through consistency: the hard bit always equals the argmax
        // of the soft vector used in the backward pass.
        let p = QuantPolicy::uniform(3, &[2, 3, 4, 8], 0.6).unwrap();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for _ in 0..200 {
            let noise = p.draw_noise(&mut rng);
            let zs = p.sample_all(&noise).unwrap();
            for z in &zs {
                let hard = select_bits_hard(z, &p.bits);
                assert_eq!(hard, p.bits[argmax_lowest(z)]);
            }
        }
    }

    #[test]
    fn temperature_schedule_endpoints() {
        assert!((temperature_at(0, 100, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((temperature_at(99, 100, 1.0, 0.1) - 0.1).abs() < 1e-12);
        let mid = temperature_at(50, 101, 1.0, 0.1);
        assert!((mid - (0.1f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs_error() {
        assert!(gumbel_softmax_sample(&[0.0], 0.0, &[0.0]).is_err());
        assert!(gumbel_softmax_sample(&[0.0], -1.0, &[0.0]).is_err());
        assert!(QuantPolicy::uniform(1, &[4, 2], 1.0).is_err());
    }
}
