use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops::{conv, elementwise, linalg, loss, norm, shape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the tape knows how to replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    AddBroadcast,
    MulBroadcast,
    Scale,
    Sigmoid,
    Tanh,
    LeakyRelu,
    Softmax,
    Conv2d,
    BatchNorm,
    BceWithLogits,
    SmoothL1,
    Sum,
    Mean,
    Reshape,
    Concat,
    Slice,
    GatherRows,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBroadcast,
        OpKind::MulBroadcast,
        OpKind::Scale,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::LeakyRelu,
        OpKind::Softmax,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::BceWithLogits,
        OpKind::SmoothL1,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::GatherRows,
        OpKind::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::MulBroadcast => "mul_broadcast",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Softmax => "softmax",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::GatherRows => "gather_rows",
            OpKind::Gather => "gather",
        }
    }
}

/// Recorded operation plus whatever the adjoint needs from the forward pass.
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Softmax(Var, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: conv::ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    BceWithLogits {
        logit: Var,
        target: Vec<T>,
        weight: Option<Vec<T>>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBroadcast(..) => OpKind::AddBroadcast,
            Op::MulBroadcast(..) => OpKind::MulBroadcast,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Gather { .. } => OpKind::Gather,
        })
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulBroadcast(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BceWithLogits { logit, .. } => vec![*logit],
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { src, .. } => vec![*src],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Gather { src, .. } => vec![*src],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient slots filled during a backward sweep.
pub(crate) struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Scalar> Grads<T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Mutable accumulator for `v`, zero-initialised on first touch.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let len = self.lens[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub(crate) fn add(&mut self, v: Var, contribution: &[T]) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(v);
        for (s, &c) in slot.iter_mut().zip(contribution) {
            *s += c;
        }
    }
}

/// Linear record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Values are stored on the tape, so a tape and its graph live on one thread.
/// Inputs always precede the operations that consume them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    consumed: bool,
    check_finite: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Non-finite checks are enabled in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
            fault: None,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Scales the adjoint of every `kind` node by 1.5. Used to confirm that
    /// gradient checks catch a broken backward rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a named trainable tensor. Binding the same name twice returns
    /// the first handle.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push_leaf(value.clone(), true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    /// Like [`Tape::param`] but without gradient tracking (frozen weights).
    pub fn frozen_param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push_leaf(value.clone(), false);
        self.param_index.insert(name.to_string(), v);
        v
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.as_ref()?.clone();
        Some(Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape"))
    }

    /// Gradients of every named parameter, in binding order. Parameters that
    /// did not influence the loss get zeros.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let kind = op.kind().expect("push records a non-leaf op");
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn ensure_live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across fan-out.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        let mut grads = Grads {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        };
        grads.slots[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads.slots[i].take() else {
                continue;
            };
            if self.fault.is_some() && node.op.kind() == self.fault {
                g.iter_mut().for_each(|v| *v *= T::lit(1.5));
            }
            self.backprop(i, &g, &mut grads)?;
        }

        self.grads = grads
            .slots
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        self.consumed = true;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut Grads<T>) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => linalg::matmul_backward(val(a), val(b), *a, *b, g, grads),
            Op::BatchMatMul(a, b) => linalg::bmm_backward(val(a), val(b), *a, *b, g, grads),
            Op::Add(a, b) => {
                grads.add(*a, g);
                grads.add(*b, g);
            }
            Op::Sub(a, b) => {
                grads.add(*a, g);
                if grads.wants(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    grads.add(*b, &neg);
                }
            }
            Op::Mul(a, b) => elementwise::mul_backward(val(a), val(b), *a, *b, g, grads),
            Op::AddBroadcast(a, b) => {
                elementwise::add_bcast_backward(val(a), val(b), *a, *b, g, grads)
            }
            Op::MulBroadcast(a, b) => {
                elementwise::mul_bcast_backward(val(a), val(b), *a, *b, g, grads)
            }
            Op::Scale(a, s) => {
                if grads.wants(*a) {
                    let d: Vec<T> = g.iter().map(|&v| v * *s).collect();
                    grads.add(*a, &d);
                }
            }
            Op::Sigmoid(a) => elementwise::sigmoid_backward(out, *a, g, grads),
            Op::Tanh(a) => elementwise::tanh_backward(out, *a, g, grads),
            Op::LeakyRelu(a, slope) => {
                elementwise::leaky_relu_backward(val(a), *slope, *a, g, grads)
            }
            Op::Softmax(a, axis) => elementwise::softmax_backward(out, *axis, *a, g, grads),
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => conv::conv2d_backward(geom, cols, val(kernel), *input, *kernel, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => norm::batch_norm_backward(
                val(gamma),
                xhat,
                inv_std,
                *train,
                (*x, *gamma, *beta),
                g,
                grads,
            ),
            Op::BceWithLogits {
                logit,
                target,
                weight,
            } => loss::bce_backward(val(logit), target, weight.as_deref(), *logit, g, grads),
            Op::SmoothL1 { pred, target } => {
                loss::smooth_l1_backward(val(pred), target, *pred, g, grads)
            }
            Op::Sum(a) => {
                if grads.wants(*a) {
                    let s = g[0];
                    grads.slot(*a).iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Mean(a) => {
                if grads.wants(*a) {
                    let n = T::lit(val(a).len() as f64);
                    let s = g[0] / n;
                    grads.slot(*a).iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Reshape(a) => grads.add(*a, g),
            Op::Concat { parts, axis } => {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| val(p).shape()).collect();
                shape::concat_backward(&shapes, parts, *axis, out.shape(), g, grads)
            }
            Op::Slice { src, axis, start } => {
                shape::slice_backward(val(src).shape(), *axis, *start, out.shape(), *src, g, grads)
            }
            Op::GatherRows { table, ids } => {
                shape::gather_rows_backward(val(table).shape(), ids, *table, g, grads)
            }
            Op::Gather { src, indices } => {
                if grads.wants(*src) {
                    let slot = grads.slot(*src);
                    for (&idx, &gv) in indices.iter().zip(g) {
                        slot[idx] += gv;
                    }
                }
            }
        }
        Ok(())
    }
}
