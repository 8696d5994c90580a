//! Fake-quantization kernels: symmetric signed weight quantization with a
//! learned step size, and clipped affine activation quantization.
//!
//! Forward values round-half-to-even; gradients follow the straight-through
//! contracts declared here and are consumed by the autodiff ops in [`crate::tape`].

use serde::{Deserialize, Serialize};

use crate::error::{CfqError, Result};

/// Signed integer bounds for a symmetric b-bit quantizer.
pub fn int_bounds(bits: u32) -> Result<(i64, i64)> {
    if bits < 2 {
        return Err(CfqError::invalid(format!("bitwidth {bits} < 2")));
    }
    if bits > 32 {
        return Err(CfqError::invalid(format!("bitwidth {bits} > 32")));
    }
    let hi = (1i64 << (bits - 1)) - 1;
    let lo = -(1i64 << (bits - 1));
    Ok((lo, hi))
}

/// Forward weight fake-quantization: s * clip(round_even(w/s), lo, hi).
pub fn quantize_weight_scalar(w: f64, step: f64, bits: u32) -> Result<f64> {
    if step <= 0.0 {
        return Err(CfqError::invalid(format!("step size {step} <= 0")));
    }
    let (lo, hi) = int_bounds(bits)?;
    Ok(step * ((w / step).round_ties_even().clamp(lo as f64, hi as f64)))
}

pub fn quantize_weights(w: &[f64], step: f64, bits: u32) -> Result<Vec<f64>> {
    if step <= 0.0 {
        return Err(CfqError::invalid(format!("step size {step} <= 0")));
    }
    let (lo, hi) = int_bounds(bits)?;
    let (lo, hi) = (lo as f64, hi as f64);
    Ok(w.iter().map(|&v| step * (v / step).round_ties_even().clamp(lo, hi)).collect())
}

/// Straight-through gradients of the weight quantizer.
///
/// d out / d w  = 1 inside the clip range, 0 outside.
/// d out / d s  = round(w/s) - w/s inside the range, clipped bound outside.
pub fn weight_quant_grads(w: f64, step: f64, bits: u32) -> (f64, f64) {
    let (lo, hi) = int_bounds(bits).expect("valid bits");
    let (lo, hi) = (lo as f64, hi as f64);
    let ratio = w / step;
    if ratio < lo {
        (0.0, lo)
    } else if ratio > hi {
        (0.0, hi)
    } else {
        (1.0, ratio.round_ties_even() - ratio)
    }
}

/// Standard step-size initialization for a weight tensor at bitwidth b:
/// 2 * mean(|w|) / sqrt(q_plus).
pub fn lsq_init_step(w: &[f64], bits: u32) -> f64 {
    let (_, hi) = int_bounds(bits).expect("valid bits");
    let mean_abs = if w.is_empty() {
        0.0
    } else {
        w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
    };
    let s = 2.0 * mean_abs / (hi as f64).sqrt();
    if s > 0.0 {
        s
    } else {
        1e-3
    }
}

// ── Activation quantizer ────────────────────────────────────────────────

/// Clipped affine activation quantizer parameters for one (layer, bit) slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantParams {
    pub clip: f64,
    pub step: f64,
    pub zero_point: f64,
}

impl ActQuantParams {
    /// Tie the step to the clip over the unsigned b-bit range.
    pub fn tied(clip: f64, bits: u32) -> Self {
        let levels = ((1u64 << bits) - 1) as f64;
        ActQuantParams { clip, step: clip / levels, zero_point: 0.0 }
    }
}

/// Forward activation fake-quantization: clamp to [0, clip], then affine
/// quantize-dequantize over the unsigned b-bit range.
pub fn quantize_activation_scalar(a: f64, p: &ActQuantParams, bits: u32) -> Result<f64> {
    if p.clip <= 0.0 {
        return Err(CfqError::invalid(format!("clip {} <= 0", p.clip)));
    }
    if p.step <= 0.0 {
        return Err(CfqError::invalid(format!("activation step {} <= 0", p.step)));
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let clamped = a.clamp(0.0, p.clip);
    let code = (clamped / p.step + p.zero_point).round_ties_even().clamp(0.0, levels);
    Ok(p.step * (code - p.zero_point))
}

/// Straight-through gradients of the activation quantizer wrt (a, clip):
/// pass-through inside [0, clip]; the clip receives the gradient where a > clip.
pub fn activation_quant_grads(a: f64, p: &ActQuantParams) -> (f64, f64) {
    if a < 0.0 {
        (0.0, 0.0)
    } else if a > p.clip {
        (0.0, 1.0)
    } else {
        (1.0, 0.0)
    }
}
