//! Minimal feed-forward classifier: affine layers + ReLU, softmax
//! cross-entropy, reverse-mode gradients for parameters and inputs, and
//! per-layer quantizer attachment points.
//!
//! The same parameters back two logit maps: `Fp` mode bypasses attached
//! quantizers, `Quantized` mode applies them. All recourse-stability metrics
//! compare these two maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CfqError, Result};
use crate::mat::Mat;
use crate::quant::{lsq_init_step, quantize_weights, ActQuantParams};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    /// (out, in) weight matrix.
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }
}

/// Per-layer quantizer state: one parameter set per candidate bitwidth.
/// Biases stay full precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantAttachment {
    /// Candidate bitwidths, ascending.
    pub bits: Vec<u32>,
    /// Learned weight step size per candidate bit.
    pub weight_steps: Vec<f64>,
    /// Activation quantizer parameters per candidate bit.
    pub act_params: Vec<ActQuantParams>,
    /// Index of the bit used by the quantized forward.
    pub selected: usize,
    pub quantize_weights: bool,
    pub quantize_activations: bool,
}

impl QuantAttachment {
    /// Weights-only attachment with standard step initialization.
    pub fn for_layer(layer: &Layer, bits: &[u32]) -> Self {
        let weight_steps = bits.iter().map(|&b| lsq_init_step(&layer.weight.data, b)).collect();
        let act_params = bits.iter().map(|&b| ActQuantParams::tied(6.0, b)).collect();
        QuantAttachment {
            bits: bits.to_vec(),
            weight_steps,
            act_params,
            selected: 0,
            quantize_weights: true,
            quantize_activations: false,
        }
    }

    pub fn selected_bits(&self) -> u32 {
        self.bits[self.selected]
    }
}

/// Feed-forward classifier with optional quantizer attachments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub attachments: Option<Vec<QuantAttachment>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Fp,
    Quantized,
}

impl ModelGraph {
    /// Seeded uniform init for the given layer widths (e.g. [d, 16, 2]).
    pub fn new_mlp(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weight = Mat::zeros(fan_out, fan_in);
            for v in weight.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            let activation =
                if i + 1 == dims.len() - 1 { Activation::Linear } else { Activation::Relu };
            layers.push(Layer { weight, bias: vec![0.0; fan_out], activation });
        }
        ModelGraph { layers, attachments: None }
    }

    /// Binary linear model with logits (0, w.x + b).
    pub fn linear_binary(w: &[f64], b: f64) -> Self {
        let d = w.len();
        let mut weight = Mat::zeros(2, d);
        weight.row_mut(1).copy_from_slice(w);
        ModelGraph {
            layers: vec![Layer { weight, bias: vec![0.0, b], activation: Activation::Linear }],
            attachments: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Weight parameter count per layer (biases excluded; they stay fp).
    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.len()).collect()
    }

    /// Multiply-accumulate count per layer for one example.
    pub fn layer_macs(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.len()).collect()
    }

    /// Attach weights-only quantizers with the given candidate bits.
    pub fn attach_quantizers(&mut self, bits: &[u32]) {
        self.attachments =
            Some(self.layers.iter().map(|l| QuantAttachment::for_layer(l, bits)).collect());
    }

    pub fn set_selected_bits(&mut self, selected: &[usize]) -> Result<()> {
        let atts = self
            .attachments
            .as_mut()
            .ok_or_else(|| CfqError::invalid("model has no quantizer attachments"))?;
        if selected.len() != atts.len() {
            return Err(CfqError::DimensionMismatch { expected: atts.len(), got: selected.len() });
        }
        for (att, &sel) in atts.iter_mut().zip(selected) {
            if sel >= att.bits.len() {
                return Err(CfqError::invalid(format!("selected index {sel} out of range")));
            }
            att.selected = sel;
        }
        Ok(())
    }

    /// Effective (possibly fake-quantized) weight matrix of one layer.
    pub fn effective_weight(&self, l: usize, mode: ForwardMode) -> Result<Mat> {
        let layer = &self.layers[l];
        match mode {
            ForwardMode::Fp => Ok(layer.weight.clone()),
            ForwardMode::Quantized => {
                let att = self
                    .attachments
                    .as_ref()
                    .ok_or_else(|| CfqError::invalid("quantized mode requested with no attachments"))?
                    .get(l)
                    .expect("one attachment per layer");
                if !att.quantize_weights {
                    return Ok(layer.weight.clone());
                }
                let s = att.weight_steps[att.selected];
                let b = att.bits[att.selected];
                Ok(Mat {
                    rows: layer.weight.rows,
                    cols: layer.weight.cols,
                    data: quantize_weights(&layer.weight.data, s, b)?,
                })
            }
        }
    }

    /// Batched forward pass; rows of `x` are examples.
    pub fn forward_batch(&self, x: &Mat, mode: ForwardMode) -> Result<Mat> {
        if x.cols != self.input_dim() {
            return Err(CfqError::DimensionMismatch { expected: self.input_dim(), got: x.cols });
        }
        if mode == ForwardMode::Quantized && self.attachments.is_none() {
            return Err(CfqError::invalid("quantized mode requested with no attachments"));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = self.effective_weight(l, mode)?;
            let mut z = h.matmul_nt(&w);
            for r in 0..z.rows {
                for c in 0..z.cols {
                    *z.at_mut(r, c) += layer.bias[c];
                }
            }
            if layer.activation == Activation::Relu && l != last {
                z = z.map(|v| v.max(0.0));
            }
            if mode == ForwardMode::Quantized && l != last {
                let att = &self.attachments.as_ref().unwrap()[l];
                if att.quantize_activations {
                    let p = att.act_params[att.selected];
                    let b = att.bits[att.selected];
                    z = z.map(|v| {
                        crate::quant::quantize_activation_scalar(v, &p, b)
                            .expect("valid activation params")
                    });
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Logits for a single example.
    pub fn forward_logits(&self, x: &[f64], mode: ForwardMode) -> Result<Vec<f64>> {
        let out = self.forward_batch(&Mat::row_vector(x), mode)?;
        Ok(out.data)
    }

    pub fn predict(&self, x: &[f64], mode: ForwardMode) -> Result<usize> {
        Ok(argmax(&self.forward_logits(x, mode)?))
    }

    pub fn accuracy(&self, x: &Mat, labels: &[usize], mode: ForwardMode) -> Result<f64> {
        let logits = self.forward_batch(x, mode)?;
        let mut correct = 0usize;
        for (r, &y) in labels.iter().enumerate() {
            if argmax(logits.row(r)) == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// SHA-256 of the backbone parameters; detects any weight update.
    pub fn backbone_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for v in &layer.weight.data {
                hasher.update(v.to_le_bytes());
            }
            for v in &layer.bias {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Target-class margin: logits[y_tgt] minus the best competing logit.
pub fn target_margin(logits: &[f64], y_tgt: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(CfqError::invalid("need at least two classes"));
    }
    if y_tgt >= logits.len() {
        return Err(CfqError::invalid(format!("target class {y_tgt} out of range")));
    }
    let mut best = f64::NEG_INFINITY;
    for (c, &v) in logits.iter().enumerate() {
        if c != y_tgt && v > best {
            best = v;
        }
    }
    Ok(logits[y_tgt] - best)
}

// ── Tape-level model graphs ─────────────────────────────────────────────

/// Tape handles for the trainable pieces of a model.
pub struct ModelBind {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    /// Per layer, per candidate bit step-size scalars (quantized paths only).
    pub steps: Vec<Vec<Var>>,
    /// Per layer, per candidate bit activation clip scalars.
    pub clips: Vec<Vec<Var>>,
}

/// Which parameter groups become differentiable leaves.
#[derive(Debug, Clone, Copy)]
pub struct Trainable {
    pub weights: bool,
    pub quant_params: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Trainable { weights: true, quant_params: true }
    }

    pub fn none() -> Self {
        Trainable { weights: false, quant_params: false }
    }
}

/// Bind model parameters onto the tape.
pub fn bind_model(tape: &mut Tape, model: &ModelGraph, trainable: Trainable) -> ModelBind {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut steps = Vec::new();
    let mut clips = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let w = if trainable.weights {
            tape.leaf(layer.weight.clone())
        } else {
            tape.constant(layer.weight.clone())
        };
        let b = if trainable.weights {
            tape.leaf(Mat::row_vector(&layer.bias))
        } else {
            tape.constant(Mat::row_vector(&layer.bias))
        };
        weights.push(w);
        biases.push(b);
        let (mut svars, mut cvars) = (Vec::new(), Vec::new());
        if let Some(atts) = &model.attachments {
            let att = &atts[l];
            for r in 0..att.bits.len() {
                let s = if trainable.quant_params {
                    tape.scalar_leaf(att.weight_steps[r])
                } else {
                    tape.scalar_constant(att.weight_steps[r])
                };
                let c = if trainable.quant_params {
                    tape.scalar_leaf(att.act_params[r].clip)
                } else {
                    tape.scalar_constant(att.act_params[r].clip)
                };
                svars.push(s);
                cvars.push(c);
            }
        }
        steps.push(svars);
        clips.push(cvars);
    }
    ModelBind { weights, biases, steps, clips }
}

/// Effective per-layer weight vars for a plain (non-mixed) forward.
pub fn effective_weights_on_tape(
    tape: &mut Tape,
    model: &ModelGraph,
    bind: &ModelBind,
    mode: ForwardMode,
) -> Result<Vec<Var>> {
    let mut out = Vec::new();
    for l in 0..model.layers.len() {
        let w = bind.weights[l];
        match mode {
            ForwardMode::Fp => out.push(w),
            ForwardMode::Quantized => {
                let atts = self_attachments(model)?;
                let att = &atts[l];
                if att.quantize_weights {
                    let s = bind.steps[l][att.selected];
                    out.push(tape.weight_quant_lsq(w, s, att.bits[att.selected]));
                } else {
                    out.push(w);
                }
            }
        }
    }
    Ok(out)
}

fn self_attachments(model: &ModelGraph) -> Result<&Vec<QuantAttachment>> {
    model
        .attachments
        .as_ref()
        .ok_or_else(|| CfqError::invalid("quantized mode requested with no attachments"))
}

/// Forward pass from externally supplied effective weights. Returns the
/// logits var. Activation quantization follows the attachment flags when
/// `mode` is quantized.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &ModelGraph,
    bind: &ModelBind,
    w_eff: &[Var],
    input: Var,
    mode: ForwardMode,
) -> Result<Var> {
    let last = model.layers.len() - 1;
    let mut h = input;
    for (l, layer) in model.layers.iter().enumerate() {
        let z = tape.matmul_nt(h, w_eff[l]);
        let mut z = tape.add_row_bias(z, bind.biases[l]);
        if layer.activation == Activation::Relu && l != last {
            z = tape.relu(z);
        }
        if mode == ForwardMode::Quantized && l != last {
            let att = &self_attachments(model)?[l];
            if att.quantize_activations {
                let clip = bind.clips[l][att.selected];
                let p = att.act_params[att.selected];
                z = tape.act_quant_pact(z, clip, p, att.bits[att.selected]);
            }
        }
        h = z;
    }
    Ok(h)
}

/// Build the per-example input gradient of the target cross-entropy as tape
/// ops, so an outer backward sweep can differentiate through it.
///
/// Returns a (batch, d) var holding d CE_i / d u_i. ReLU and activation-
/// quantizer masks are taken from the current forward values and treated as
/// constants, matching straight-through practice.
pub fn input_gradient_graph(
    tape: &mut Tape,
    model: &ModelGraph,
    bind: &ModelBind,
    w_eff: &[Var],
    input: Var,
    targets: &[usize],
    mode: ForwardMode,
) -> Result<Var> {
    let last = model.layers.len() - 1;
    let mut h = input;
    // Forward, recording pre-activation masks.
    let mut masks: Vec<Option<Mat>> = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let z = tape.matmul_nt(h, w_eff[l]);
        let z = tape.add_row_bias(z, bind.biases[l]);
        let mut a = z;
        let mut mask: Option<Mat> = None;
        if layer.activation == Activation::Relu && l != last {
            let m = tape.value(z).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            a = tape.relu(z);
            mask = Some(m);
        }
        if mode == ForwardMode::Quantized && l != last {
            let att = &self_attachments(model)?[l];
            if att.quantize_activations {
                let p = att.act_params[att.selected];
                let pre = tape.value(a).clone();
                let qmask = pre.map(|v| if (0.0..=p.clip).contains(&v) { 1.0 } else { 0.0 });
                let clip = bind.clips[l][att.selected];
                a = tape.act_quant_pact(a, clip, p, att.bits[att.selected]);
                mask = Some(match mask {
                    Some(m) => Mat {
                        rows: m.rows,
                        cols: m.cols,
                        data: m.data.iter().zip(&qmask.data).map(|(x, y)| x * y).collect(),
                    },
                    None => qmask,
                });
            }
        }
        masks.push(mask);
        h = a;
    }

    // d CE_i / d logits = softmax - onehot, built from differentiable ops.
    let p = tape.softmax_rows(h);
    let n = tape.value(p).rows;
    let c = tape.value(p).cols;
    let mut onehot = Mat::zeros(n, c);
    for (r, &y) in targets.iter().enumerate() {
        *onehot.at_mut(r, y) = 1.0;
    }
    let onehot = tape.constant(onehot);
    let mut v = tape.sub(p, onehot);

    // Backward chain through the affine layers, masks as constants.
    for l in (0..model.layers.len()).rev() {
        v = tape.matmul(v, w_eff[l]);
        if l > 0 {
            if let Some(m) = &masks[l - 1] {
                v = tape.mul_const_mask(v, m.clone());
            }
        }
    }
    Ok(v)
}

// ── Loss and gradients (value-level API) ────────────────────────────────

/// Gradients for every parameter group plus the batch input gradient.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub weight_grads: Vec<Mat>,
    pub bias_grads: Vec<Vec<f64>>,
    /// Step-size gradient for the selected candidate of each layer.
    pub step_grads: Vec<f64>,
    /// Clip gradient for the selected candidate of each layer.
    pub clip_grads: Vec<f64>,
    /// d loss / d x for every batch row.
    pub input_grad: Option<Mat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWrt {
    Params,
    Input,
    Both,
}

/// Mean cross-entropy over the batch plus requested gradients.
pub fn loss_and_grads(
    model: &ModelGraph,
    x: &Mat,
    labels: &[usize],
    mode: ForwardMode,
    wrt: GradWrt,
) -> Result<(f64, GradientBundle)> {
    for &y in labels {
        if y >= model.num_classes() {
            return Err(CfqError::invalid(format!("label {y} out of range")));
        }
    }
    let mut tape = Tape::new();
    let want_params = wrt != GradWrt::Input;
    let bind = bind_model(
        &mut tape,
        model,
        Trainable { weights: want_params, quant_params: want_params },
    );
    let input = if wrt == GradWrt::Params {
        tape.constant(x.clone())
    } else {
        tape.leaf(x.clone())
    };
    let w_eff = effective_weights_on_tape(&mut tape, model, &bind, mode)?;
    let logits = forward_on_tape(&mut tape, model, &bind, &w_eff, input, mode)?;
    let loss = tape.ce_mean_rows(logits, labels.to_vec());
    let grads = tape.backward(loss);

    let mut bundle = GradientBundle {
        weight_grads: Vec::new(),
        bias_grads: Vec::new(),
        step_grads: Vec::new(),
        clip_grads: Vec::new(),
        input_grad: None,
    };
    if want_params {
        for l in 0..model.layers.len() {
            bundle.weight_grads.push(grads.of(&tape, bind.weights[l]));
            bundle.bias_grads.push(grads.of(&tape, bind.biases[l]).data);
            if let Some(atts) = &model.attachments {
                let sel = atts[l].selected;
                bundle.step_grads.push(grads.of(&tape, bind.steps[l][sel]).data[0]);
                bundle.clip_grads.push(grads.of(&tape, bind.clips[l][sel]).data[0]);
            }
        }
    }
    if wrt != GradWrt::Params {
        bundle.input_grad = Some(grads.of(&tape, input));
    }
    Ok((tape.scalar(loss), bundle))
}

// ── Compiled model (fast value-level forward/backward) ──────────────────

/// Model with effective weights materialized once, for solver and metric
/// inner loops where the parameters are fixed.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
    relu: Vec<bool>,
    act_quant: Vec<Option<(ActQuantParams, u32)>>,
}

impl CompiledModel {
    pub fn compile(model: &ModelGraph, mode: ForwardMode) -> Result<Self> {
        let last = model.layers.len() - 1;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut relu = Vec::new();
        let mut act_quant = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            weights.push(model.effective_weight(l, mode)?);
            biases.push(layer.bias.clone());
            relu.push(layer.activation == Activation::Relu && l != last);
            let aq = match (&model.attachments, mode) {
                (Some(atts), ForwardMode::Quantized) if l != last => {
                    let att = &atts[l];
                    if att.quantize_activations {
                        Some((att.act_params[att.selected], att.bits[att.selected]))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            act_quant.push(aq);
        }
        Ok(CompiledModel { weights, biases, relu, act_quant })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols
    }

    pub fn num_classes(&self) -> usize {
        self.weights.last().unwrap().rows
    }

    pub fn logits(&self, u: &[f64]) -> Vec<f64> {
        let mut h = u.to_vec();
        for l in 0..self.weights.len() {
            let w = &self.weights[l];
            let mut z = vec![0.0; w.rows];
            for (r, zr) in z.iter_mut().enumerate() {
                let row = w.row(r);
                let mut acc = self.biases[l][r];
                for (a, b) in row.iter().zip(&h) {
                    acc += a * b;
                }
                *zr = acc;
            }
            if self.relu[l] {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            if let Some((p, b)) = &self.act_quant[l] {
                for v in z.iter_mut() {
                    *v = crate::quant::quantize_activation_scalar(*v, p, *b)
                        .expect("valid activation params");
                }
            }
            h = z;
        }
        h
    }

    pub fn predict(&self, u: &[f64]) -> usize {
        argmax(&self.logits(u))
    }

    pub fn accuracy(&self, x: &Mat, labels: &[usize]) -> f64 {
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| self.predict(x.row(*i)) == y)
            .count();
        correct as f64 / labels.len().max(1) as f64
    }

    pub fn margin(&self, u: &[f64], y_tgt: usize) -> Result<f64> {
        target_margin(&self.logits(u), y_tgt)
    }

    /// Input gradient of one logit coordinate, with straight-through masks
    /// for ReLU and activation quantizers.
    pub fn logit_input_grad(&self, u: &[f64], class: usize) -> Vec<f64> {
        let nl = self.weights.len();
        let mut h = u.to_vec();
        let mut masks: Vec<Option<Vec<f64>>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let w = &self.weights[l];
            let mut z = vec![0.0; w.rows];
            for (r, zr) in z.iter_mut().enumerate() {
                let row = w.row(r);
                let mut acc = self.biases[l][r];
                for (a, b) in row.iter().zip(&h) {
                    acc += a * b;
                }
                *zr = acc;
            }
            let mut mask: Option<Vec<f64>> = None;
            if self.relu[l] {
                let m: Vec<f64> = z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
                mask = Some(m);
            }
            if let Some((p, b)) = &self.act_quant[l] {
                let m2: Vec<f64> = z
                    .iter()
                    .map(|&v| if (0.0..=p.clip).contains(&v) { 1.0 } else { 0.0 })
                    .collect();
                for v in z.iter_mut() {
                    *v = crate::quant::quantize_activation_scalar(*v, p, *b)
                        .expect("valid activation params");
                }
                mask = Some(match mask {
                    Some(m) => m.iter().zip(&m2).map(|(a, b)| a * b).collect(),
                    None => m2,
                });
            }
            masks.push(mask);
            h = z;
        }
        let mut v = vec![0.0; self.num_classes()];
        v[class] = 1.0;
        for l in (0..nl).rev() {
            let w = &self.weights[l];
            let mut g = vec![0.0; w.cols];
            for (r, &vr) in v.iter().enumerate() {
                if vr == 0.0 {
                    continue;
                }
                let row = w.row(r);
                for (gc, wc) in g.iter_mut().zip(row) {
                    *gc += vr * wc;
                }
            }
            if l > 0 {
                if let Some(m) = &masks[l - 1] {
                    for (gc, mc) in g.iter_mut().zip(m) {
                        *gc *= mc;
                    }
                }
            }
            v = g;
        }
        v
    }

    /// Cross-entropy against `y_tgt` plus its input gradient, with
    /// straight-through masks for ReLU and activation quantizers.
    pub fn ce_and_input_grad(&self, u: &[f64], y_tgt: usize) -> (f64, Vec<f64>) {
        let nl = self.weights.len();
        let mut h = u.to_vec();
        let mut masks: Vec<Option<Vec<f64>>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let w = &self.weights[l];
            let mut z = vec![0.0; w.rows];
            for (r, zr) in z.iter_mut().enumerate() {
                let row = w.row(r);
                let mut acc = self.biases[l][r];
                for (a, b) in row.iter().zip(&h) {
                    acc += a * b;
                }
                *zr = acc;
            }
            let mut mask: Option<Vec<f64>> = None;
            if self.relu[l] {
                let m: Vec<f64> = z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
                mask = Some(m);
            }
            if let Some((p, b)) = &self.act_quant[l] {
                let m2: Vec<f64> = z
                    .iter()
                    .map(|&v| if (0.0..=p.clip).contains(&v) { 1.0 } else { 0.0 })
                    .collect();
                for v in z.iter_mut() {
                    *v = crate::quant::quantize_activation_scalar(*v, p, *b)
                        .expect("valid activation params");
                }
                mask = Some(match mask {
                    Some(m) => m.iter().zip(&m2).map(|(a, b)| a * b).collect(),
                    None => m2,
                });
            }
            masks.push(mask);
            h = z;
        }
        // Stable CE and softmax.
        let logits = h;
        let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        let loss = mx + z.ln() - logits[y_tgt];
        let mut v: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
        v[y_tgt] -= 1.0;
        // Backward through affine layers.
        for l in (0..nl).rev() {
            let w = &self.weights[l];
            let mut g = vec![0.0; w.cols];
            for (r, &vr) in v.iter().enumerate() {
                if vr == 0.0 {
                    continue;
                }
                let row = w.row(r);
                for (gc, wc) in g.iter_mut().zip(row) {
                    *gc += vr * wc;
                }
            }
            if l > 0 {
                if let Some(m) = &masks[l - 1] {
                    for (gc, mc) in g.iter_mut().zip(m) {
                        *gc *= mc;
                    }
                }
            }
            v = g;
        }
        (loss, v)
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Plain SGD with momentum over named parameter slots.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: std::collections::BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: Default::default() }
    }

    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        let vel = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        for i in 0..param.len() {
            vel[i] = self.momentum * vel[i] + grad[i];
            param[i] -= self.lr * vel[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_layer_returns_input_logits() {
        let model = ModelGraph {
            layers: vec![Layer {
                weight: Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
                bias: vec![0.0, 0.0],
                activation: Activation::Linear,
            }],
            attachments: None,
        };
        let out = model.forward_logits(&[1.0, 2.0], ForwardMode::Fp).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn constant_map_from_zero_weights() {
        let model = ModelGraph {
            layers: vec![Layer {
                weight: Mat::zeros(2, 3),
                bias: vec![0.3, -0.3],
                activation: Activation::Linear,
            }],
            attachments: None,
        };
        for x in [[0.0, 0.0, 0.0], [5.0, -2.0, 1.0]] {
            assert_eq!(model.forward_logits(&x, ForwardMode::Fp).unwrap(), vec![0.3, -0.3]);
        }
    }

    #[test]
    fn pass_through_attachment_equals_fp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = ModelGraph::new_mlp(&[3, 4, 2], &mut rng);
        model.attach_quantizers(&[8]);
        for att in model.attachments.as_mut().unwrap() {
            att.quantize_weights = false;
        }
        let x = [0.5, -1.0, 2.0];
        let fp = model.forward_logits(&x, ForwardMode::Fp).unwrap();
        let q = model.forward_logits(&x, ForwardMode::Quantized).unwrap();
        for (a, b) in fp.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantized_mode_without_attachments_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = ModelGraph::new_mlp(&[3, 2], &mut rng);
        assert!(model.forward_logits(&[1.0, 0.0, 0.0], ForwardMode::Quantized).is_err());
    }

    #[test]
    fn sixteen_bit_quantization_is_near_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = ModelGraph::new_mlp(&[4, 8, 3], &mut rng);
        model.attach_quantizers(&[16]);
        // Step tuned to the weight range, rather than the LSQ training init.
        let max_abs: Vec<f64> = model
            .layers
            .iter()
            .map(|l| l.weight.data.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        for (att, m) in model.attachments.as_mut().unwrap().iter_mut().zip(max_abs) {
            att.weight_steps[0] = (m / 32767.0).max(1e-12);
        }
        let x = Mat::from_vec(5, 4, (0..20).map(|i| (i as f64) * 0.17 - 1.5).collect());
        let fp = model.forward_batch(&x, ForwardMode::Fp).unwrap();
        let q = model.forward_batch(&x, ForwardMode::Quantized).unwrap();
        for (a, b) in fp.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let model = ModelGraph {
            layers: vec![Layer {
                weight: Mat::zeros(4, 2),
                bias: vec![0.0; 4],
                activation: Activation::Linear,
            }],
            attachments: None,
        };
        let x = Mat::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.0]);
        let (loss, _) =
            loss_and_grads(&model, &x, &[0, 1, 3], ForwardMode::Fp, GradWrt::Params).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_have_small_loss() {
        let model = ModelGraph {
            layers: vec![Layer {
                weight: Mat::from_vec(2, 1, vec![-50.0, 50.0]),
                bias: vec![0.0, 0.0],
                activation: Activation::Linear,
            }],
            attachments: None,
        };
        let x = Mat::from_vec(1, 1, vec![1.0]);
        let (loss, _) = loss_and_grads(&model, &x, &[1], ForwardMode::Fp, GradWrt::Params).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn label_out_of_range_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = ModelGraph::new_mlp(&[2, 2], &mut rng);
        let x = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        assert!(loss_and_grads(&model, &x, &[2], ForwardMode::Fp, GradWrt::Params).is_err());
    }

    fn fd_check_input_grad(model: &ModelGraph, x0: &Mat, labels: &[usize]) {
        let (_, bundle) =
            loss_and_grads(model, x0, labels, ForwardMode::Fp, GradWrt::Input).unwrap();
        let analytic = bundle.input_grad.unwrap();
        for i in 0..x0.len() {
            let h = 1e-4;
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut xm = x0.clone();
            xm.data[i] -= h;
            let (lp, _) =
                loss_and_grads(model, &xp, labels, ForwardMode::Fp, GradWrt::Params).unwrap();
            let (lm, _) =
                loss_and_grads(model, &xm, labels, ForwardMode::Fp, GradWrt::Params).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic.data[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic.data[i] - numeric).abs() / denom < 1e-4,
                "entry {i}: {} vs {numeric}",
                analytic.data[i]
            );
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ModelGraph::new_mlp(&[4, 8, 3], &mut rng);
        let x = Mat::from_vec(2, 4, vec![0.3, -0.8, 1.2, 0.1, -0.4, 0.6, 0.9, -1.1]);
        fd_check_input_grad(&model, &x, &[1, 2]);
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelGraph::new_mlp(&[3, 6, 6, 2], &mut rng);
        let x = Mat::from_vec(4, 3, (0..12).map(|i| (i as f64) * 0.31 - 1.7).collect());
        let labels = vec![0usize, 1, 1, 0];
        let (_, bundle) =
            loss_and_grads(&model, &x, &labels, ForwardMode::Fp, GradWrt::Params).unwrap();
        for l in 0..model.num_layers() {
            for i in 0..model.layers[l].weight.len() {
                let h = 1e-5;
                let mut mp = model.clone();
                mp.layers[l].weight.data[i] += h;
                let mut mm = model.clone();
                mm.layers[l].weight.data[i] -= h;
                let (lp, _) =
                    loss_and_grads(&mp, &x, &labels, ForwardMode::Fp, GradWrt::Params).unwrap();
                let (lm, _) =
                    loss_and_grads(&mm, &x, &labels, ForwardMode::Fp, GradWrt::Params).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = bundle.weight_grads[l].data[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "layer {l} weight {i}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn margin_examples() {
        assert_eq!(target_margin(&[2.0, 0.5, -1.0], 0).unwrap(), 1.5);
        assert_eq!(target_margin(&[1.0, 1.0], 0).unwrap(), 0.0);
        assert_eq!(target_margin(&[1.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(target_margin(&[0.0, 3.0], 0).unwrap(), -3.0);
        assert!(target_margin(&[0.0, 3.0], 2).is_err());
        assert!(target_margin(&[1.0], 0).is_err());
    }

    #[test]
    fn argmax_iff_positive_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..2000 {
            let c = rng.gen_range(2usize..6);
            let logits: Vec<f64> =
                (0..c).map(|_| (rng.gen_range(-20i32..=20) as f64) * 0.25).collect();
            for y in 0..c {
                let m = target_margin(&logits, y).unwrap();
                let is_pred = argmax(&logits) == y;
                // A tie (margin zero) never counts as predicted unless the
                // target is the lowest tied index.
                if m > 0.0 {
                    assert!(is_pred);
                } else if m < 0.0 {
                    assert!(!is_pred);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = ModelGraph::new_mlp(&[5, 7, 2], &mut rng);
        model.attach_quantizers(&[2, 3, 4, 8]);
        let text = model.to_json().unwrap();
        let back = ModelGraph::from_json(&text).unwrap();
        assert_eq!(model.layers.len(), back.layers.len());
        for (a, b) in model.layers.iter().zip(&back.layers) {
            assert_eq!(a.weight.data, b.weight.data);
            assert_eq!(a.bias, b.bias);
        }
        let (a, b) = (model.attachments.unwrap(), back.attachments.unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.weight_steps, y.weight_steps);
            assert_eq!(x.bits, y.bits);
        }
    }

    #[test]
    fn compiled_model_agrees_with_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = ModelGraph::new_mlp(&[4, 6, 3], &mut rng);
        model.attach_quantizers(&[4]);
        for mode in [ForwardMode::Fp, ForwardMode::Quantized] {
            let cm = CompiledModel::compile(&model, mode).unwrap();
            let u = [0.4, -1.1, 0.2, 0.8];
            let a = model.forward_logits(&u, mode).unwrap();
            let b = cm.logits(&u);
            assert_eq!(a, b);
            let x = Mat::row_vector(&u);
            let (loss, bundle) =
                loss_and_grads(&model, &x, &[2], mode, GradWrt::Input).unwrap();
            let (loss2, grad2) = cm.ce_and_input_grad(&u, 2);
            assert!((loss - loss2).abs() < 1e-12);
            let g1 = bundle.input_grad.unwrap();
            for (a, b) in g1.data.iter().zip(&grad2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelGraph::new_mlp(&[4, 6, 2], &mut rng);
        let x = [0.2, -0.4, 0.8, 1.6];
        let a = model.forward_logits(&x, ForwardMode::Fp).unwrap();
        let b = model.forward_logits(&x, ForwardMode::Fp).unwrap();
        assert_eq!(a, b);
    }
}
