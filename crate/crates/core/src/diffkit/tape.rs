//! Recording tape and reverse pass.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, cross_entropy_grad, kl_row, kl_row_grad};
use crate::error::{Error, Result};
use crate::numerics::{squarings_for, Matrix, TAYLOR_ORDER};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Trainable parameter slots of the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Skew,
    LnGain,
    LnBias,
    W1,
    B1,
    W2,
    B2,
}

impl ParamId {
    pub const ALL: [ParamId; 7] = [
        ParamId::Skew,
        ParamId::LnGain,
        ParamId::LnBias,
        ParamId::W1,
        ParamId::B1,
        ParamId::W2,
        ParamId::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Skew => "skew",
            ParamId::LnGain => "ln_gain",
            ParamId::LnBias => "ln_bias",
            ParamId::W1 => "linear1.weight",
            ParamId::B1 => "linear1.bias",
            ParamId::W2 => "linear2.weight",
            ParamId::B2 => "linear2.bias",
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Elementwise nonlinearity inside the residual MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    GeluTanh,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    #[cfg(test)]
    pub(crate) fn at(index: usize) -> NodeId {
        NodeId(index)
    }

    /// The most recently recorded node. Panics on an empty tape.
    pub fn last(tape: &Tape) -> NodeId {
        assert!(!tape.is_empty(), "empty tape");
        NodeId(tape.len() - 1)
    }
}

/// Deliberate corruption of a backward rule, used to check that gradient
/// checking actually detects broken rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    ScaleActivationGrad(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
        trainable: bool,
    },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    AddIdentity(NodeId, f64),
    AddRowBias(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Activation(NodeId, Activation),
    WeightedSum(NodeId, Matrix),
    Kl {
        student: NodeId,
        teacher: Matrix,
        tau_teacher: f64,
        tau_student: f64,
    },
    CrossEntropy {
        student: NodeId,
        labels: Vec<usize>,
        tau: f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Ordered record of primitive applications with cached forward values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { trainable, .. } => *trainable,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(
            Op::Leaf {
                param: None,
                trainable: false,
            },
            value,
        )
    }

    /// Anonymous trainable leaf; its gradient is available through [`Tape::gradients`].
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(
            Op::Leaf {
                param: None,
                trainable: true,
            },
            value,
        )
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> NodeId {
        self.push(
            Op::Leaf {
                param: Some(id),
                trainable: true,
            },
            value,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_identity(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).add_identity(s);
        self.push(Op::AddIdentity(a, s), v)
    }

    /// Adds the `1 × n` row `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = add_row_bias(self.value(x), self.value(bias));
        self.push(Op::AddRowBias(x, bias), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).columns(start, len);
        self.push(Op::SliceCols(a, start, len), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (value, normalized, inv_std) =
            layer_norm(self.value(x), self.value(gain), self.value(bias));
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            value,
        )
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        let v = self.value(x).map(|e| act.apply(e));
        self.push(Op::Activation(x, act), v)
    }

    /// `Σ a ⊙ weights` as a `1×1` node.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Matrix) -> NodeId {
        assert_eq!(self.value(a).shape(), weights.shape());
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(x, w)| x * w)
            .sum();
        self.push(Op::WeightedSum(a, weights), Matrix::from_vec_unchecked(1, 1, vec![s]))
    }

    /// Batch-mean KL divergence between teacher and student softmaxes.
    pub fn kl_loss(
        &mut self,
        student: NodeId,
        teacher: Matrix,
        tau_teacher: f64,
        tau_student: f64,
    ) -> Result<NodeId> {
        let s = self.value(student);
        if s.shape() != teacher.shape() {
            return Err(Error::invalid(format!(
                "teacher {:?} and student {:?} logits differ in shape",
                teacher.shape(),
                s.shape()
            )));
        }
        // Reuse the checked scalar entry point for argument validation.
        super::loss::kl_loss_batch(&teacher, s, tau_teacher, tau_student)?;
        let v = kl_value(s, &teacher, tau_teacher, tau_student);
        Ok(self.push(
            Op::Kl {
                student,
                teacher,
                tau_teacher,
                tau_student,
            },
            Matrix::from_vec_unchecked(1, 1, vec![v]),
        ))
    }

    /// Batch-mean cross-entropy of `softmax(student / tau)` against `labels`.
    pub fn cross_entropy(&mut self, student: NodeId, labels: Vec<usize>, tau: f64) -> Result<NodeId> {
        let s = self.value(student);
        if labels.len() != s.rows() || s.rows() == 0 {
            return Err(Error::invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                s.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= s.cols()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                s.cols()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let v = ce_value(s, &labels, tau);
        Ok(self.push(
            Op::CrossEntropy {
                student,
                labels,
                tau,
            },
            Matrix::from_vec_unchecked(1, 1, vec![v]),
        ))
    }

    /// Records `exp(a)` as scale, Horner and squaring primitives, identical
    /// to [`crate::numerics::mat_exp`].
    pub fn mat_exp(&mut self, a: NodeId) -> NodeId {
        let s = squarings_for(self.value(a).frobenius_norm());
        let x = self.scale(a, 0.5f64.powi(s as i32));
        let first = self.scale(x, 1.0 / TAYLOR_ORDER as f64);
        let mut p = self.add_identity(first, 1.0);
        for k in (1..TAYLOR_ORDER).rev() {
            let xp = self.matmul(x, p);
            let scaled = self.scale(xp, 1.0 / k as f64);
            p = self.add_identity(scaled, 1.0);
        }
        for _ in 0..s {
            p = self.matmul(p, p);
        }
        p
    }

    /// Recompute every node from the leaves.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |id: &NodeId| &values[id.0];
            let out = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                Op::MatMul(a, b) => v(a).matmul(v(b)),
                Op::MatMulT(a, b) => v(a).matmul_t(v(b)),
                Op::Add(a, b) => v(a).add(v(b)),
                Op::Scale(a, s) => v(a).scale(*s),
                Op::AddIdentity(a, s) => v(a).add_identity(*s),
                Op::AddRowBias(x, b) => add_row_bias(v(x), v(b)),
                Op::SliceCols(a, start, len) => v(a).columns(*start, *len),
                Op::LayerNorm { x, gain, bias, .. } => layer_norm(v(x), v(gain), v(bias)).0,
                Op::Activation(x, act) => v(x).map(|e| act.apply(e)),
                Op::WeightedSum(a, w) => Matrix::from_vec_unchecked(
                    1,
                    1,
                    vec![v(a).data().iter().zip(w.data()).map(|(x, w)| x * w).sum()],
                ),
                Op::Kl {
                    student,
                    teacher,
                    tau_teacher,
                    tau_student,
                } => Matrix::from_vec_unchecked(
                    1,
                    1,
                    vec![kl_value(v(student), teacher, *tau_teacher, *tau_student)],
                ),
                Op::CrossEntropy {
                    student,
                    labels,
                    tau,
                } => Matrix::from_vec_unchecked(1, 1, vec![ce_value(v(student), labels, *tau)]),
            };
            values.push(out);
        }
        values
    }

    /// Reverse pass from the last node, which must be a `1×1` scalar. Returns
    /// the adjoint of every node that requires a gradient.
    pub fn gradients(&self, loss_seed: f64) -> Result<Vec<Option<Matrix>>> {
        let last = self
            .nodes
            .last()
            .ok_or_else(|| Error::invalid("cannot backpropagate an empty tape"))?;
        if last.value.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "tape terminal is {:?}, expected a scalar loss",
                last.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[self.nodes.len() - 1] = Some(Matrix::from_vec_unchecked(1, 1, vec![loss_seed]));

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(grads)
    }

    fn backward(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, contribution: Matrix| {
            match &mut grads[id.0] {
                Some(existing) => existing.axpy(1.0, &contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(*a, g.matmul_t(val(b)));
                }
                if needs(b) {
                    acc(*b, val(a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if needs(a) {
                    acc(*a, g.matmul(val(b)));
                }
                if needs(b) {
                    acc(*b, g.t_matmul(val(a)));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(b) {
                    acc(*b, g.clone());
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    acc(*a, g.scale(*s));
                }
            }
            Op::AddIdentity(a, _) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
            }
            Op::AddRowBias(x, b) => {
                if needs(x) {
                    acc(*x, g.clone());
                }
                if needs(b) {
                    acc(*b, column_sums(g));
                }
            }
            Op::SliceCols(a, start, len) => {
                if needs(a) {
                    let src = val(a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        d.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                    }
                    acc(*a, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gamma = val(gain);
                if needs(gain) {
                    acc(*gain, column_sums(&g.zip_map(normalized, |a, b| a * b)));
                }
                if needs(bias) {
                    acc(*bias, column_sums(g));
                }
                if needs(x) {
                    let (rows, cols) = g.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let inv_n = 1.0 / cols as f64;
                    for i in 0..rows {
                        let gr = g.row(i);
                        let xh = normalized.row(i);
                        let dxh: Vec<f64> = gr.iter().zip(gamma.row(0)).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() * inv_n;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * inv_n;
                        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                            *out = inv_std[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Activation(x, act) => {
                if needs(x) {
                    let fault = match self.fault {
                        Some(BackwardFault::ScaleActivationGrad(f)) => f,
                        None => 1.0,
                    };
                    let d = val(x).zip_map(g, |xv, gv| gv * act.derivative(xv) * fault);
                    acc(*x, d);
                }
            }
            Op::WeightedSum(a, w) => {
                if needs(a) {
                    acc(*a, w.scale(g[(0, 0)]));
                }
            }
            Op::Kl {
                student,
                teacher,
                tau_teacher,
                tau_student,
            } => {
                if needs(student) {
                    let s = val(student);
                    let scale = g[(0, 0)] / s.rows() as f64;
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        let row = kl_row_grad(teacher.row(i), s.row(i), *tau_teacher, *tau_student);
                        for (o, r) in d.row_mut(i).iter_mut().zip(row) {
                            *o = r * scale;
                        }
                    }
                    acc(*student, d);
                }
            }
            Op::CrossEntropy {
                student,
                labels,
                tau,
            } => {
                if needs(student) {
                    let s = val(student);
                    let scale = g[(0, 0)] / s.rows() as f64;
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for (i, &label) in labels.iter().enumerate() {
                        let row = cross_entropy_grad(s.row(i), label, *tau);
                        for (o, r) in d.row_mut(i).iter_mut().zip(row) {
                            *o = r * scale;
                        }
                    }
                    acc(*student, d);
                }
            }
        }
    }

    /// Gradients of every named parameter leaf.
    pub fn param_gradients(&self, loss_seed: f64) -> Result<GradientSet> {
        let grads = self.gradients(loss_seed)?;
        let mut out: Vec<(ParamId, Matrix)> = Vec::new();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let Op::Leaf {
                param: Some(id), ..
            } = node.op
            {
                let g = g.expect("parameter leaves always carry a gradient");
                match out.iter_mut().find(|(p, _)| *p == id) {
                    Some((_, existing)) => existing.axpy(1.0, &g),
                    None => out.push((id, g)),
                }
            }
        }
        // The skew generator is parameterized by its strict upper triangle.
        for (id, g) in out.iter_mut() {
            if *id == ParamId::Skew {
                *g = g.sub(&g.transpose());
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(GradientSet { grads: out })
    }
}

fn parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddIdentity(a, _)
        | Op::SliceCols(a, _, _)
        | Op::Activation(a, _)
        | Op::WeightedSum(a, _) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Kl { student, .. } | Op::CrossEntropy { student, .. } => vec![*student],
    }
}

pub(crate) fn add_row_bias(x: &Matrix, bias: &Matrix) -> Matrix {
    assert_eq!(bias.shape(), (1, x.cols()), "bias must be 1 x {}", x.cols());
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias.row(0)) {
            *o += b;
        }
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Row-wise layer norm; returns `(output, normalized input, 1/std per row)`.
pub(crate) fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    assert_eq!(gain.shape(), (1, cols));
    assert_eq!(bias.shape(), (1, cols));
    let mut normalized = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..cols {
            let xh = (r[j] - mean) * is;
            normalized[(i, j)] = xh;
            out[(i, j)] = gain[(0, j)] * xh + bias[(0, j)];
        }
    }
    (out, normalized, inv_std)
}

fn kl_value(student: &Matrix, teacher: &Matrix, tau_teacher: f64, tau_student: f64) -> f64 {
    let total: f64 = (0..student.rows())
        .map(|i| kl_row(teacher.row(i), student.row(i), tau_teacher, tau_student))
        .sum();
    total / student.rows() as f64
}

fn ce_value(student: &Matrix, labels: &[usize], tau: f64) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| cross_entropy(student.row(i), l, tau))
        .sum();
    total / student.rows() as f64
}

/// One gradient matrix per trainable parameter, in [`ParamId`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<(ParamId, Matrix)>,
}

impl GradientSet {
    pub fn new(grads: Vec<(ParamId, Matrix)>) -> Self {
        let mut grads = grads;
        grads.sort_by_key(|(id, _)| *id);
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(id, g)| (*id, g))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|(_, g)| g.is_finite())
    }

    pub fn scale(&self, s: f64) -> GradientSet {
        GradientSet {
            grads: self.grads.iter().map(|(id, g)| (*id, g.scale(s))).collect(),
        }
    }

    /// Largest entry-wise difference over all parameters.
    pub fn max_abs_diff(&self, other: &GradientSet) -> f64 {
        self.iter()
            .map(|(id, g)| other.get(id).map_or(f64::INFINITY, |o| g.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }
}

/// Reverse pass over a tape whose terminal node is the scalar loss.
pub fn backprop(tape: &Tape, loss_seed: f64) -> Result<GradientSet> {
    tape.param_gradients(loss_seed)
}
