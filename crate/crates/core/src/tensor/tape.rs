use super::conv;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product; either side may be a one-element tensor that broadcasts.
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, k: usize },
    Concat { a: Var, b: Var },
    MseMean { a: Var, b: Var },
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Concat { .. } => "concat_channels",
            Op::MseMean { .. } => "mse_mean",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Concat { a, b } | Op::MseMean { a, b } => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sum(a) | Op::Mean(a) | Op::GlobalAvgPool(a) => {
                vec![a]
            }
            Op::MaxPool2d { input, .. } | Op::Upsample { input, .. } => vec![input],
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                vec![input, weight, bias]
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Nodes are appended as operations run, so index order is a topological
/// order and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects any operation whose output contains NaN or infinity.
    pub fn with_finite_check(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns the gradient of every reachable node that requires a gradient,
    /// then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| if matches!(n.op, Op::Leaf) && n.requires_grad { g } else { None })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, contribution: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    send(a, g.clone(), grads);
                }
                if wants(b) {
                    send(b, g.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    send(a, g.clone(), grads);
                }
                if wants(b) {
                    send(b, g.map(|v| -v), grads);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    send(a, mul_grad(g, vb, va.shape()), grads);
                }
                if wants(b) {
                    send(b, mul_grad(g, va, vb.shape()), grads);
                }
            }
            Op::Scale(a, s) => {
                if wants(a) {
                    send(a, g.map(|v| v * s), grads);
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let x = val(a);
                    let d = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    send(a, d, grads);
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    send(a, Tensor::full(val(a).shape(), g.data()[0]), grads);
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let x = val(a);
                    send(a, Tensor::full(x.shape(), g.data()[0] / x.numel() as f64), grads);
                }
            }
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let grads_out = conv::conv2d_backward(
                    val(input),
                    val(weight),
                    g,
                    stride,
                    padding,
                    wants(input),
                    wants(weight),
                );
                if let Some(dx) = grads_out.input {
                    send(input, dx, grads);
                }
                if let Some(dw) = grads_out.weight {
                    send(weight, dw, grads);
                }
                if wants(bias) {
                    send(bias, conv::bias_grad(g)?, grads);
                }
            }
            Op::MaxPool2d { input, ref argmax } => {
                if wants(input) {
                    let mut dx = Tensor::zeros(val(input).shape());
                    let buf = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        buf[src] += gv;
                    }
                    send(input, dx, grads);
                }
            }
            Op::Upsample { input, k } => {
                if wants(input) {
                    send(input, conv::upsample_backward(g, val(input).shape(), k)?, grads);
                }
            }
            Op::Concat { a, b } => {
                let (da, db) = conv::split_channels(g, val(a).dims4()?.1)?;
                if wants(a) {
                    send(a, da, grads);
                }
                if wants(b) {
                    send(b, db, grads);
                }
            }
            Op::MseMean { a, b } => {
                let (va, vb) = (val(a), val(b));
                let scale = 2.0 * g.data()[0] / va.numel() as f64;
                let diff = va.zip_map(vb, |x, y| scale * (x - y))?;
                if wants(b) {
                    send(b, diff.map(|v| -v), grads);
                }
                if wants(a) {
                    send(a, diff, grads);
                }
            }
            Op::GlobalAvgPool(a) => {
                if wants(a) {
                    let x = val(a);
                    let (n, c, h, w) = x.dims4()?;
                    let hw = h * w;
                    let gd = g.data();
                    let dx = Tensor::from_fn(x.shape(), |i| gd[i / hw] / hw as f64);
                    debug_assert_eq!(gd.len(), n * c);
                    send(a, dx, grads);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = val(input);
                let w = val(weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[0];
                let gd = g.data();
                if wants(input) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        for o in 0..k {
                            let gv = gd[r * k + o];
                            let wrow = &w.data()[o * d..(o + 1) * d];
                            for (acc, wv) in dx[r * d..(r + 1) * d].iter_mut().zip(wrow) {
                                *acc += gv * wv;
                            }
                        }
                    }
                    send(input, Tensor::new(&[n, d], dx)?, grads);
                }
                if wants(weight) {
                    let mut dw = vec![0.0; k * d];
                    for r in 0..n {
                        let xrow = &x.data()[r * d..(r + 1) * d];
                        for o in 0..k {
                            let gv = gd[r * k + o];
                            for (acc, xv) in dw[o * d..(o + 1) * d].iter_mut().zip(xrow) {
                                *acc += gv * xv;
                            }
                        }
                    }
                    send(weight, Tensor::new(&[k, d], dw)?, grads);
                }
                if wants(bias) {
                    let mut db = vec![0.0; k];
                    for r in 0..n {
                        for o in 0..k {
                            db[o] += gd[r * k + o];
                        }
                    }
                    send(bias, Tensor::new(&[k], db)?, grads);
                }
            }
            Op::SoftmaxCrossEntropy { logits, ref labels, ref probs } => {
                if wants(logits) {
                    let shape = val(logits).shape();
                    let (n, k) = (shape[0], shape[1]);
                    let scale = g.data()[0] / n as f64;
                    let mut d = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        d[r * k + label] -= 1.0;
                    }
                    d.iter_mut().for_each(|v| *v *= scale);
                    send(logits, Tensor::new(shape, d)?, grads);
                }
            }
        }
        Ok(())
    }
}

fn mul_grad(g: &Tensor, other: &Tensor, target_shape: &[usize]) -> Tensor {
    let target_numel: usize = target_shape.iter().product();
    if target_numel != g.numel() {
        // target was the broadcast scalar
        let dot: f64 = g.data().iter().zip(other.data()).map(|(a, b)| a * b).sum();
        return Tensor::full(target_shape, dot);
    }
    let gd = g.data();
    let od = other.data();
    if od.len() == 1 {
        Tensor::from_fn(target_shape, |i| gd[i] * od[0])
    } else {
        Tensor::from_fn(target_shape, |i| gd[i] * od[i])
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
