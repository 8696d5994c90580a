//! Reverse-mode autodiff over small dense matrices.
//!
//! Values are computed eagerly as ops are recorded; `backward` runs one
//! reverse sweep from a scalar output. Straight-through ops (weight/activation
//! quantizers, hard bit selection, projection masks) implement their declared
//! surrogate gradients here. Differentiating *through* an unrolled inner
//! gradient (e.g. a projected-gradient recourse step) is done by building that
//! inner gradient out of these primitives, so the outer sweep picks up the
//! mixed second-order terms without a separate higher-order engine.

use crate::mat::Mat;
use crate::quant::{
    activation_quant_grads, quantize_activation_scalar, quantize_weights, weight_quant_grads,
    ActQuantParams,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward mode of the mixed-precision weight selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    /// Forward uses the argmax branch; backward flows through the soft
    /// weights (policy) and fully into the selected branch (weights).
    Hard,
    /// Forward is the convex mixture; backward is the exact gradient. Used
    /// for gradient checks of the declared soft path.
    Soft,
}

enum Op {
    Leaf,
    /// a (m,k) * b (k,n)
    MatMul(Var, Var),
    /// a (m,k) * b^T, b (n,k)
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// a (m,n) + bias (1,n) broadcast over rows
    AddRowBias(Var, Var),
    Scale(Var, f64),
    /// elementwise product of two nodes
    Mul(Var, Var),
    /// elementwise product with a constant mask
    MulConstMask(Var, Mat),
    /// each row multiplied elementwise by a constant row vector
    MulConstRow(Var, Vec<f64>),
    /// matrix node scaled by a 1x1 scalar node
    MulScalar(Var, Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    /// mean cross-entropy of rows against integer labels
    CeMeanRows(Var, Vec<usize>),
    /// per-row target margin: logit[y] - max_{c != y} logit[c]
    TargetMarginRows(Var, Vec<usize>),
    RowGather(Var, Vec<usize>),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    /// dot with a constant vector, flattened
    DotConstVec(Var, Vec<f64>),
    /// LSQ weight fake-quantizer: (weights, step scalar, bits)
    WeightQuantLsq(Var, Var, u32),
    /// PACT activation fake-quantizer: (activations, clip scalar, step/zp, bits)
    ActQuantPact(Var, Var, ActQuantParams, u32),
    /// mixed-precision selector: (soft simplex z, one candidate per entry)
    SteMixWeights(Var, Vec<Var>, MixMode),
}

struct Node {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

/// Gradient tape. Nodes are appended in topological order.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data[0]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.leaf(Mat::from_vec(1, 1, vec![v]))
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Mat::from_vec(1, 1, vec![v]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNt(a, b), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let value = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape mismatch");
        let value = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), value, rg)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.rows, 1, "bias must be a row vector");
        assert_eq!(va.cols, vb.cols, "bias width mismatch");
        let mut value = va.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                *value.at_mut(r, c) += vb.data[c];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddRowBias(a, bias), value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape mismatch");
        let value = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), value, rg)
    }

    pub fn mul_const_mask(&mut self, a: Var, mask: Mat) -> Var {
        let va = self.value(a);
        assert_eq!((va.rows, va.cols), (mask.rows, mask.cols), "mask shape mismatch");
        let value = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&mask.data).map(|(x, y)| x * y).collect(),
        };
        let rg = self.rg(a);
        self.push(Op::MulConstMask(a, mask), value, rg)
    }

    pub fn mul_const_row(&mut self, a: Var, row: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.cols, row.len(), "row width mismatch");
        let mut value = va.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                *value.at_mut(r, c) *= row[c];
            }
        }
        let rg = self.rg(a);
        self.push(Op::MulConstRow(a, row), value, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).map(|v| v * sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(Op::MulScalar(a, s), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(Op::Abs(a), value, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), value, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    pub fn ce_mean_rows(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let va = self.value(logits);
        assert_eq!(va.rows, labels.len(), "label count mismatch");
        let mut total = 0.0;
        for r in 0..va.rows {
            let row = va.row(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let value = Mat::from_vec(1, 1, vec![total / va.rows as f64]);
        let rg = self.rg(logits);
        self.push(Op::CeMeanRows(logits, labels), value, rg)
    }

    pub fn target_margin_rows(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let va = self.value(logits);
        assert_eq!(va.rows, targets.len(), "target count mismatch");
        let mut out = Mat::zeros(va.rows, 1);
        for r in 0..va.rows {
            let row = va.row(r);
            let y = targets[r];
            let mut best = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if c != y && v > best {
                    best = v;
                }
            }
            out.data[r] = row[y] - best;
        }
        let rg = self.rg(logits);
        self.push(Op::TargetMarginRows(logits, targets), out, rg)
    }

    pub fn row_gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(idx.len(), va.cols);
        for (k, &r) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(va.row(r));
        }
        let rg = self.rg(a);
        self.push(Op::RowGather(a, idx), out, rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(va.rows, 1);
        for r in 0..va.rows {
            out.data[r] = va.row(r).iter().sum();
        }
        let rg = self.rg(a);
        self.push(Op::RowSum(a), out, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Mat::from_vec(1, 1, vec![s]), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s: f64 = va.data.iter().sum::<f64>() / va.len() as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), Mat::from_vec(1, 1, vec![s]), rg)
    }

    pub fn dot_const_vec(&mut self, a: Var, c: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "dot length mismatch");
        let s: f64 = va.data.iter().zip(&c).map(|(x, y)| x * y).sum();
        let rg = self.rg(a);
        self.push(Op::DotConstVec(a, c), Mat::from_vec(1, 1, vec![s]), rg)
    }

    /// Fake-quantize a weight tensor with a learned step size.
    pub fn weight_quant_lsq(&mut self, w: Var, step: Var, bits: u32) -> Var {
        let s = self.scalar(step);
        let value = Mat {
            rows: self.value(w).rows,
            cols: self.value(w).cols,
            data: quantize_weights(&self.value(w).data, s, bits).expect("positive step"),
        };
        let rg = self.rg(w) || self.rg(step);
        self.push(Op::WeightQuantLsq(w, step, bits), value, rg)
    }

    /// Fake-quantize activations with a learned clipping threshold.
    pub fn act_quant_pact(&mut self, a: Var, clip: Var, params: ActQuantParams, bits: u32) -> Var {
        let cv = self.scalar(clip);
        let p = ActQuantParams { clip: cv, ..params };
        let value = self
            .value(a)
            .map(|v| quantize_activation_scalar(v, &p, bits).expect("valid activation params"));
        let rg = self.rg(a) || self.rg(clip);
        self.push(Op::ActQuantPact(a, clip, p, bits), value, rg)
    }

    /// Select among candidate quantized weights with a relaxed simplex vector.
    /// Ties in the hard argmax break to the lowest index.
    pub fn ste_mix_weights(&mut self, z: Var, candidates: Vec<Var>, mode: MixMode) -> Var {
        let zv = self.value(z).data.clone();
        assert_eq!(zv.len(), candidates.len(), "one candidate per simplex entry");
        assert!(!candidates.is_empty());
        let shape = {
            let v0 = self.value(candidates[0]);
            (v0.rows, v0.cols)
        };
        let value = match mode {
            MixMode::Hard => {
                let mut best = 0;
                for (r, &p) in zv.iter().enumerate() {
                    if p > zv[best] {
                        best = r;
                    }
                }
                self.value(candidates[best]).clone()
            }
            MixMode::Soft => {
                let mut out = Mat::zeros(shape.0, shape.1);
                for (r, &c) in candidates.iter().enumerate() {
                    let vc = self.value(c);
                    for (o, v) in out.data.iter_mut().zip(&vc.data) {
                        *o += zv[r] * v;
                    }
                }
                out
            }
        };
        let rg = self.rg(z) || candidates.iter().any(|&c| self.rg(c));
        self.push(Op::SteMixWeights(z, candidates, mode), value, rg)
    }

    /// Reverse sweep from a scalar output; returns per-node gradients.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..self.nodes.len()).rev() {
            let up = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(up);
                continue;
            }
            {
                // Accumulate into inputs.
                let node = &self.nodes[id];
                match &node.op {
                    Op::Leaf => {}
                    Op::MatMul(a, b) => {
                        if self.rg(*a) {
                            let g = up.matmul_nt(&self.nodes[b.0].value);
                            accumulate(&mut grads, a.0, g);
                        }
                        if self.rg(*b) {
                            let g = self.nodes[a.0].value.matmul_tn(&up);
                            accumulate(&mut grads, b.0, g);
                        }
                    }
                    Op::MatMulNt(a, b) => {
                        if self.rg(*a) {
                            let g = up.matmul(&self.nodes[b.0].value);
                            accumulate(&mut grads, a.0, g);
                        }
                        if self.rg(*b) {
                            // out = a b^T, so dL/db = up^T a, shape (n,k).
                            let g = up.matmul_tn(&self.nodes[a.0].value);
                            accumulate(&mut grads, b.0, g);
                        }
                    }
                    Op::Add(a, b) => {
                        if self.rg(*a) {
                            accumulate(&mut grads, a.0, up.clone());
                        }
                        if self.rg(*b) {
                            accumulate(&mut grads, b.0, up.clone());
                        }
                    }
                    Op::Sub(a, b) => {
                        if self.rg(*a) {
                            accumulate(&mut grads, a.0, up.clone());
                        }
                        if self.rg(*b) {
                            accumulate(&mut grads, b.0, up.map(|v| -v));
                        }
                    }
                    Op::AddRowBias(a, bias) => {
                        if self.rg(*a) {
                            accumulate(&mut grads, a.0, up.clone());
                        }
                        if self.rg(*bias) {
                            let mut g = Mat::zeros(1, up.cols);
                            for r in 0..up.rows {
                                for c in 0..up.cols {
                                    g.data[c] += up.at(r, c);
                                }
                            }
                            accumulate(&mut grads, bias.0, g);
                        }
                    }
                    Op::Scale(a, c) => {
                        if self.rg(*a) {
                            accumulate(&mut grads, a.0, up.map(|v| v * c));
                        }
                    }
                    Op::Mul(a, b) => {
                        if self.rg(*a) {
                            let vb = &self.nodes[b.0].value;
                            let g = Mat {
                                rows: up.rows,
                                cols: up.cols,
                                data: up.data.iter().zip(&vb.data).map(|(u, v)| u * v).collect(),
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                        if self.rg(*b) {
                            let va = &self.nodes[a.0].value;
                            let g = Mat {
                                rows: up.rows,
                                cols: up.cols,
                                data: up.data.iter().zip(&va.data).map(|(u, v)| u * v).collect(),
                            };
                            accumulate(&mut grads, b.0, g);
                        }
                    }
                    Op::MulConstMask(a, mask) => {
                        if self.rg(*a) {
                            let g = Mat {
                                rows: up.rows,
                                cols: up.cols,
                                data: up.data.iter().zip(&mask.data).map(|(u, m)| u * m).collect(),
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::MulConstRow(a, row) => {
                        if self.rg(*a) {
                            let mut g = up.clone();
                            for r in 0..g.rows {
                                for c in 0..g.cols {
                                    *g.at_mut(r, c) *= row[c];
                                }
                            }
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::MulScalar(a, s) => {
                        let sv = self.nodes[s.0].value.data[0];
                        if self.rg(*a) {
                            accumulate(&mut grads, a.0, up.map(|v| v * sv));
                        }
                        if self.rg(*s) {
                            let va = &self.nodes[a.0].value;
                            let g: f64 = up.data.iter().zip(&va.data).map(|(u, v)| u * v).sum();
                            accumulate(&mut grads, s.0, Mat::from_vec(1, 1, vec![g]));
                        }
                    }
                    Op::Relu(a) => {
                        if self.rg(*a) {
                            let va = &self.nodes[a.0].value;
                            let g = Mat {
                                rows: up.rows,
                                cols: up.cols,
                                data: up
                                    .data
                                    .iter()
                                    .zip(&va.data)
                                    .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                                    .collect(),
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::Abs(a) => {
                        if self.rg(*a) {
                            let va = &self.nodes[a.0].value;
                            let g = Mat {
                                rows: up.rows,
                                cols: up.cols,
                                data: up
                                    .data
                                    .iter()
                                    .zip(&va.data)
                                    .map(|(u, v)| u * sign0(*v))
                                    .collect(),
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::Sqrt(a) => {
                        if self.rg(*a) {
                            let out_v = &node.value;
                            let g = Mat {
                                rows: up.rows,
                                cols: up.cols,
                                data: up
                                    .data
                                    .iter()
                                    .zip(&out_v.data)
                                    .map(|(u, s)| if *s > 0.0 { u / (2.0 * s) } else { 0.0 })
                                    .collect(),
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::SoftmaxRows(a) => {
                        if self.rg(*a) {
                            let p = &node.value;
                            let mut g = Mat::zeros(p.rows, p.cols);
                            for r in 0..p.rows {
                                let prow = p.row(r);
                                let urow = up.row(r);
                                let dot: f64 = prow.iter().zip(urow).map(|(x, y)| x * y).sum();
                                for c in 0..p.cols {
                                    g.data[r * p.cols + c] = prow[c] * (urow[c] - dot);
                                }
                            }
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::CeMeanRows(logits, labels) => {
                        if self.rg(*logits) {
                            let lv = &self.nodes[logits.0].value;
                            let scale = up.data[0] / lv.rows as f64;
                            let mut g = Mat::zeros(lv.rows, lv.cols);
                            for r in 0..lv.rows {
                                let row = lv.row(r);
                                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                                for c in 0..lv.cols {
                                    let p = (row[c] - mx).exp() / z;
                                    let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                                    g.data[r * lv.cols + c] = scale * (p - onehot);
                                }
                            }
                            accumulate(&mut grads, logits.0, g);
                        }
                    }
                    Op::TargetMarginRows(logits, targets) => {
                        if self.rg(*logits) {
                            let lv = &self.nodes[logits.0].value;
                            let mut g = Mat::zeros(lv.rows, lv.cols);
                            for r in 0..lv.rows {
                                let row = lv.row(r);
                                let y = targets[r];
                                let mut best = usize::MAX;
                                let mut bestv = f64::NEG_INFINITY;
                                for (c, &v) in row.iter().enumerate() {
                                    if c != y && v > bestv {
                                        bestv = v;
                                        best = c;
                                    }
                                }
                                g.data[r * lv.cols + y] += up.data[r];
                                g.data[r * lv.cols + best] -= up.data[r];
                            }
                            accumulate(&mut grads, logits.0, g);
                        }
                    }
                    Op::RowGather(a, idx) => {
                        if self.rg(*a) {
                            let va = &self.nodes[a.0].value;
                            let mut g = Mat::zeros(va.rows, va.cols);
                            for (k, &r) in idx.iter().enumerate() {
                                for c in 0..va.cols {
                                    *g.at_mut(r, c) += up.at(k, c);
                                }
                            }
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::RowSum(a) => {
                        if self.rg(*a) {
                            let va = &self.nodes[a.0].value;
                            let mut g = Mat::zeros(va.rows, va.cols);
                            for r in 0..va.rows {
                                for c in 0..va.cols {
                                    *g.at_mut(r, c) = up.data[r];
                                }
                            }
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::SumAll(a) => {
                        if self.rg(*a) {
                            let va = &self.nodes[a.0].value;
                            let g = Mat {
                                rows: va.rows,
                                cols: va.cols,
                                data: vec![up.data[0]; va.len()],
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::MeanAll(a) => {
                        if self.rg(*a) {
                            let va = &self.nodes[a.0].value;
                            let g = Mat {
                                rows: va.rows,
                                cols: va.cols,
                                data: vec![up.data[0] / va.len() as f64; va.len()],
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::DotConstVec(a, c) => {
                        if self.rg(*a) {
                            let va = &self.nodes[a.0].value;
                            let g = Mat {
                                rows: va.rows,
                                cols: va.cols,
                                data: c.iter().map(|v| v * up.data[0]).collect(),
                            };
                            accumulate(&mut grads, a.0, g);
                        }
                    }
                    Op::WeightQuantLsq(w, step, bits) => {
                        let wv = &self.nodes[w.0].value;
                        let s = self.nodes[step.0].value.data[0];
                        let mut gw = Mat::zeros(wv.rows, wv.cols);
                        let mut gs = 0.0;
                        for i in 0..wv.len() {
                            let (dw, ds) = weight_quant_grads(wv.data[i], s, *bits);
                            gw.data[i] = up.data[i] * dw;
                            gs += up.data[i] * ds;
                        }
                        if self.rg(*w) {
                            accumulate(&mut grads, w.0, gw);
                        }
                        if self.rg(*step) {
                            accumulate(&mut grads, step.0, Mat::from_vec(1, 1, vec![gs]));
                        }
                    }
                    Op::ActQuantPact(a, clip, params, _bits) => {
                        let av = &self.nodes[a.0].value;
                        let mut ga = Mat::zeros(av.rows, av.cols);
                        let mut gc = 0.0;
                        for i in 0..av.len() {
                            let (da, dc) = activation_quant_grads(av.data[i], params);
                            ga.data[i] = up.data[i] * da;
                            gc += up.data[i] * dc;
                        }
                        if self.rg(*a) {
                            accumulate(&mut grads, a.0, ga);
                        }
                        if self.rg(*clip) {
                            accumulate(&mut grads, clip.0, Mat::from_vec(1, 1, vec![gc]));
                        }
                    }
                    Op::SteMixWeights(z, candidates, mode) => {
                        let zv = self.nodes[z.0].value.data.clone();
                        if self.rg(*z) {
                            let mut gz = Mat::zeros(
                                self.nodes[z.0].value.rows,
                                self.nodes[z.0].value.cols,
                            );
                            for (r, &c) in candidates.iter().enumerate() {
                                let vc = &self.nodes[c.0].value;
                                gz.data[r] =
                                    up.data.iter().zip(&vc.data).map(|(u, v)| u * v).sum();
                            }
                            accumulate(&mut grads, z.0, gz);
                        }
                        match mode {
                            MixMode::Hard => {
                                let mut best = 0;
                                for (r, &p) in zv.iter().enumerate() {
                                    if p > zv[best] {
                                        best = r;
                                    }
                                }
                                let c = candidates[best];
                                if self.rg(c) {
                                    accumulate(&mut grads, c.0, up.clone());
                                }
                            }
                            MixMode::Soft => {
                                for (r, &c) in candidates.iter().enumerate() {
                                    if self.rg(c) {
                                        accumulate(&mut grads, c.0, up.map(|v| v * zv[r]));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            grads[id] = Some(up);
        }
        Grads { grads }
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: usize, g: Mat) {
    match &mut grads[id] {
        Some(existing) => {
            debug_assert_eq!(existing.len(), g.len());
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Gradients indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a node, zeros if the node was not reached.
    pub fn of(&self, tape: &Tape, v: Var) -> Mat {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => {
                let val = tape.value(v);
                Mat::zeros(val.rows, val.cols)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference gradient of `f` wrt the entries of `x0`.
    fn fd_grad(x0: &Mat, mut f: impl FnMut(&Mat) -> f64) -> Mat {
        let mut g = Mat::zeros(x0.rows, x0.cols);
        for i in 0..x0.len() {
            let h = 1e-5 * x0.data[i].abs().max(1.0);
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut xm = x0.clone();
            xm.data[i] -= h;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64, what: &str) {
        for i in 0..a.len() {
            let denom = a.data[i].abs().max(b.data[i].abs()).max(1e-6);
            assert!(
                (a.data[i] - b.data[i]).abs() / denom < tol,
                "{what}: entry {i}: {} vs {}",
                a.data[i],
                b.data[i]
            );
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let w0 = Mat::from_vec(3, 2, vec![0.3, -0.2, 0.8, 0.5, -0.6, 0.1]);
        let x = Mat::from_vec(4, 2, vec![1.0, 2.0, -0.5, 0.3, 0.7, -1.2, 0.0, 0.4]);
        let eval = |w: &Mat| -> f64 {
            let mut t = Tape::new();
            let wv = t.leaf(w.clone());
            let xv = t.constant(x.clone());
            let h = t.matmul_nt(xv, wv);
            let a = t.relu(h);
            let s = t.sum_all(a);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let wv = t.leaf(w0.clone());
        let xv = t.constant(x.clone());
        let h = t.matmul_nt(xv, wv);
        let a = t.relu(h);
        let s = t.sum_all(a);
        let grads = t.backward(s);
        let analytic = grads.of(&t, wv);
        let numeric = fd_grad(&w0, eval);
        assert_close(&analytic, &numeric, 1e-6, "matmul_nt+relu");
    }

    #[test]
    fn softmax_ce_matches_finite_differences() {
        let logits0 = Mat::from_vec(3, 4, vec![0.2, -0.5, 1.0, 0.3, 0.0, 0.0, 0.1, -0.1, 2.0, 1.0, -1.0, 0.5]);
        let labels = vec![2usize, 0, 1];
        let eval = |l: &Mat| -> f64 {
            let mut t = Tape::new();
            let lv = t.leaf(l.clone());
            let ce = t.ce_mean_rows(lv, labels.clone());
            t.scalar(ce)
        };
        let mut t = Tape::new();
        let lv = t.leaf(logits0.clone());
        let ce = t.ce_mean_rows(lv, labels.clone());
        let grads = t.backward(ce);
        assert_close(&grads.of(&t, lv), &fd_grad(&logits0, eval), 1e-6, "ce");
    }

    #[test]
    fn softmax_rows_jacobian_matches_finite_differences() {
        let a0 = Mat::from_vec(2, 3, vec![0.1, 0.9, -0.4, 1.5, 0.0, 0.2]);
        let weights = vec![0.7, -0.3, 0.4, 0.2, 0.5, -0.8];
        let eval = |a: &Mat| -> f64 {
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let p = t.softmax_rows(av);
            let s = t.dot_const_vec(p, weights.clone());
            t.scalar(s)
        };
        let mut t = Tape::new();
        let av = t.leaf(a0.clone());
        let p = t.softmax_rows(av);
        let s = t.dot_const_vec(p, weights.clone());
        let grads = t.backward(s);
        assert_close(&grads.of(&t, av), &fd_grad(&a0, eval), 1e-6, "softmax");
    }

    #[test]
    fn mul_scalar_flows_to_both_sides() {
        let a0 = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let s = t.scalar_leaf(0.7);
        let m = t.mul_scalar(a, s);
        let out = t.sum_all(m);
        let grads = t.backward(out);
        assert_close(&grads.of(&t, a), &a0.map(|_| 0.7), 1e-12, "dmul/da");
        let gs = grads.of(&t, s).data[0];
        assert!((gs - a0.data.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn weight_quant_backward_follows_declared_surrogate() {
        // Surrogate for d/dw is identity inside the clip range, so comparing
        // against the surrogate (not the true zero-a.e. derivative) means the
        // gradient equals the upstream gradient there.
        let w0 = Mat::from_vec(1, 4, vec![0.26, -0.13, 1.5, -1.5]);
        let mut t = Tape::new();
        let w = t.leaf(w0.clone());
        let s = t.scalar_leaf(0.1);
        let q = t.weight_quant_lsq(w, s, 4);
        let out = t.sum_all(q);
        let grads = t.backward(out);
        let gw = grads.of(&t, w);
        assert_eq!(gw.data, vec![1.0, 1.0, 0.0, 0.0]);
        // Step-size gradient: residual terms inside range, bounds outside.
        let gs = grads.of(&t, s).data[0];
        let expect = (3.0 - 2.6) + (-(1.3f64.round_ties_even()) + 1.3) + 7.0 + (-8.0);
        assert!((gs - expect).abs() < 1e-9, "{gs} vs {expect}");
    }

    #[test]
    fn soft_mix_matches_finite_differences_through_policy() {
        // Soft mode is the declared surrogate for the policy path; it must be
        // exactly finite-difference checkable.
        let logits0 = Mat::from_vec(1, 3, vec![0.3, -0.1, 0.6]);
        let w = Mat::from_vec(2, 2, vec![0.4, -0.9, 1.3, 0.2]);
        let x = Mat::from_vec(3, 2, vec![0.5, 1.0, -0.3, 0.8, 0.1, -0.2]);
        let labels = vec![0usize, 1, 0];
        let eval = |l: &Mat| -> f64 {
            let mut t = Tape::new();
            let lv = t.leaf(l.clone());
            let sc = t.scale(lv, 1.0 / 0.5);
            let z = t.softmax_rows(sc);
            let wv = t.leaf(w.clone());
            let steps = [0.05, 0.1, 0.2];
            let cands: Vec<Var> = steps
                .iter()
                .map(|&s| {
                    let sv = t.scalar_constant(s);
                    t.weight_quant_lsq(wv, sv, 4)
                })
                .collect();
            let mixed = t.ste_mix_weights(z, cands, MixMode::Soft);
            let xv = t.constant(x.clone());
            let h = t.matmul_nt(xv, mixed);
            let ce = t.ce_mean_rows(h, labels.clone());
            t.scalar(ce)
        };
        let mut t = Tape::new();
        let lv = t.leaf(logits0.clone());
        let sc = t.scale(lv, 1.0 / 0.5);
        let z = t.softmax_rows(sc);
        let wv = t.leaf(w.clone());
        let steps = [0.05, 0.1, 0.2];
        let cands: Vec<Var> = steps
            .iter()
            .map(|&s| {
                let sv = t.scalar_constant(s);
                t.weight_quant_lsq(wv, sv, 4)
            })
            .collect();
        let mixed = t.ste_mix_weights(z, cands, MixMode::Soft);
        let xv = t.constant(x.clone());
        let h = t.matmul_nt(xv, mixed);
        let ce = t.ce_mean_rows(h, labels.clone());
        let grads = t.backward(ce);
        assert_close(&grads.of(&t, lv), &fd_grad(&logits0, eval), 1e-5, "policy soft path");
    }

    #[test]
    fn hard_mix_forward_is_argmax_with_low_tie() {
        let mut t = Tape::new();
        let z = t.constant(Mat::from_vec(1, 2, vec![0.5, 0.5]));
        let c0 = t.constant(Mat::from_vec(1, 1, vec![10.0]));
        let c1 = t.constant(Mat::from_vec(1, 1, vec![20.0]));
        let m = t.ste_mix_weights(z, vec![c0, c1], MixMode::Hard);
        assert_eq!(t.value(m).data[0], 10.0);
    }

    #[test]
    fn row_gather_scatter_adds() {
        let a0 = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut t = Tape::new();
        let a = t.leaf(a0);
        let g = t.row_gather(a, vec![2, 0, 2]);
        let s = t.sum_all(g);
        let grads = t.backward(s);
        assert_eq!(grads.of(&t, a).data, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn target_margin_rows_values_and_grads() {
        let mut t = Tape::new();
        let l = t.leaf(Mat::from_vec(2, 3, vec![2.0, 0.5, -1.0, 0.0, 3.0, 0.0]));
        let m = t.target_margin_rows(l, vec![0, 0]);
        assert_eq!(t.value(m).data, vec![1.5, -3.0]);
        let s = t.sum_all(m);
        let grads = t.backward(s);
        assert_eq!(grads.of(&t, l).data, vec![1.0, -1.0, 0.0, 1.0, -1.0, 0.0]);
    }
}
