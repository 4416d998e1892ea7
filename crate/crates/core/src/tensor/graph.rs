use super::kernels::{self, BatchNormSaved};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with frozen running statistics.
    Eval {
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
    },
}

/// Operation tags accepted by [`Graph::apply`], with their attributes.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// `[m, k] @ [k, n]`, or `[m, k] @ [n, k]^T` with `trans_b`.
    MatMul { trans_b: bool },
    /// Stride-1 same-padded convolution of `[n, cin, h, w]` by `[cout, cin, kh, kw]`.
    Conv2d,
    /// Adds a `[c]` bias along axis 1.
    AddBias,
    Add,
    Mul,
    /// Sum of all elements to a scalar.
    Sum,
    Relu,
    BatchNorm2d(BatchNormMode),
    MeanPool2,
    /// Mel-axis mean followed by time max + time mean: `[n, c, h, w] -> [n, c]`.
    GlobalPool,
    /// Mean softmax cross-entropy of `[n, k]` logits.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Reshape { shape: Vec<usize> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Relu => "relu",
            OpKind::BatchNorm2d(_) => "batchnorm2d",
            OpKind::MeanPool2 => "mean_pool2",
            OpKind::GlobalPool => "global_pool",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::Reshape { .. } => "reshape",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul { .. } | OpKind::Conv2d | OpKind::AddBias | OpKind::Add | OpKind::Mul => 2,
            OpKind::BatchNorm2d(_) => 3,
            _ => 1,
        }
    }
}

enum Saved<T: Scalar> {
    Nothing,
    BatchNorm(BatchNormSaved<T>),
    Argmax(Vec<usize>),
    Probs(Vec<f64>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Option<OpKind>,
    inputs: Vec<NodeId>,
    saved: Saved<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only computation tape. Nodes are stored in creation order, which is
/// a topological order, so the backward sweep is a reverse scan.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    tracking: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward context.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// A graph that only evaluates; [`Graph::backward`] fails on it.
    pub fn without_grad() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad: requires_grad && self.tracking,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a parameter leaf.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Batch mean, biased variance and reduction count of a training-mode
    /// batch norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64], usize)> {
        match &self.nodes[id.0].saved {
            Saved::BatchNorm(s) => Some((&s.mean, &s.var, s.count)),
            _ => None,
        }
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(Error::shape(
                kind.name(),
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let (value, saved) = match &kind {
            OpKind::MatMul { trans_b } => (kernels::matmul(v(0), v(1), *trans_b)?, Saved::Nothing),
            OpKind::Conv2d => (kernels::conv2d(v(0), v(1))?, Saved::Nothing),
            OpKind::AddBias => (kernels::add_bias(v(0), v(1))?, Saved::Nothing),
            OpKind::Add => (kernels::add(v(0), v(1))?, Saved::Nothing),
            OpKind::Mul => (kernels::mul(v(0), v(1))?, Saved::Nothing),
            OpKind::Sum => (kernels::sum(v(0)), Saved::Nothing),
            OpKind::Relu => (kernels::relu(v(0)), Saved::Nothing),
            OpKind::BatchNorm2d(BatchNormMode::Train) => {
                let (y, s) = kernels::batchnorm_train(v(0), v(1), v(2))?;
                (y, Saved::BatchNorm(s))
            }
            OpKind::BatchNorm2d(BatchNormMode::Eval {
                running_mean,
                running_var,
            }) => (
                kernels::batchnorm_eval(v(0), v(1), v(2), running_mean, running_var)?,
                Saved::Nothing,
            ),
            OpKind::MeanPool2 => (kernels::mean_pool2(v(0))?, Saved::Nothing),
            OpKind::GlobalPool => {
                let (y, arg) = kernels::global_pool(v(0))?;
                (y, Saved::Argmax(arg))
            }
            OpKind::SoftmaxCrossEntropy { labels } => {
                let (loss, probs) = kernels::softmax_cross_entropy(v(0), labels)?;
                (Tensor::scalar(T::from_f64(loss)), Saved::Probs(probs))
            }
            OpKind::Reshape { shape } => (v(0).clone().reshape(shape)?, Saved::Nothing),
        };
        let requires_grad = self.tracking && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let saved = if requires_grad || matches!(saved, Saved::BatchNorm(_)) {
            saved
        } else {
            Saved::Nothing
        };
        self.nodes.push(Node {
            value,
            op: Some(kind),
            inputs: inputs.to_vec(),
            saved,
            requires_grad,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul { trans_b: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul { trans_b: true }, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Conv2d, &[x, w])
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::AddBias, &[x, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BatchNormMode) -> Result<NodeId> {
        self.apply(OpKind::BatchNorm2d(mode), &[x, gamma, beta])
    }

    pub fn mean_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MeanPool2, &[x])
    }

    pub fn global_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::GlobalPool, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(
            OpKind::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }

    /// Propagates d(loss)/d(node) to every parameter leaf. Gradients add onto
    /// whatever previous calls left in place; see [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.tracking {
            return Err(Error::Autodiff(
                "backward through a graph built without gradient tracking".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff(
                "loss does not depend on any tracked parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g),
                }
                continue;
            };
            let input_grads = self.op_backward(op, node, &g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for n in &mut self.nodes {
            if n.op.is_none() && n.requires_grad && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(())
    }

    fn op_backward(&self, op: &OpKind, node: &Node<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i].0];
        let needs = |i: usize| inp(i).requires_grad;
        match op {
            OpKind::MatMul { trans_b } => {
                let (da, db) = kernels::matmul_backward(&inp(0).value, &inp(1).value, *trans_b, g);
                vec![Some(da), Some(db)]
            }
            OpKind::Conv2d => {
                let (dx, dw) = kernels::conv2d_backward(&inp(0).value, &inp(1).value, g, needs(0));
                vec![dx, Some(dw)]
            }
            OpKind::AddBias => {
                let c = inp(1).value.numel();
                vec![Some(g.clone()), Some(kernels::add_bias_backward(g, c))]
            }
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Mul => {
                let da = kernels::mul(g, &inp(1).value).expect("shapes validated");
                let db = kernels::mul(g, &inp(0).value).expect("shapes validated");
                vec![Some(da), Some(db)]
            }
            OpKind::Sum => {
                vec![Some(Tensor::full(inp(0).value.shape(), g.data()[0]))]
            }
            OpKind::Relu => vec![Some(kernels::relu_backward(&inp(0).value, g))],
            OpKind::BatchNorm2d(mode) => {
                let (dx, dgamma, dbeta) = match (mode, &node.saved) {
                    (BatchNormMode::Train, Saved::BatchNorm(s)) => {
                        kernels::batchnorm_train_backward(s, &inp(1).value, g)
                    }
                    (
                        BatchNormMode::Eval {
                            running_mean,
                            running_var,
                        },
                        _,
                    ) => kernels::batchnorm_eval_backward(
                        &inp(0).value,
                        &inp(1).value,
                        running_mean,
                        running_var,
                        g,
                    ),
                    _ => unreachable!("training batch norm always saves its context"),
                };
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            OpKind::MeanPool2 => vec![Some(kernels::mean_pool2_backward(inp(0).value.shape(), g))],
            OpKind::GlobalPool => {
                let Saved::Argmax(arg) = &node.saved else {
                    unreachable!("global pool saves argmax")
                };
                vec![Some(kernels::global_pool_backward(inp(0).value.shape(), arg, g))]
            }
            OpKind::SoftmaxCrossEntropy { labels } => {
                let Saved::Probs(p) = &node.saved else {
                    unreachable!("cross-entropy saves probabilities")
                };
                vec![Some(kernels::softmax_cross_entropy_backward(
                    inp(0).value.shape(),
                    p,
                    labels,
                    g.data()[0].to_f64(),
                ))]
            }
            OpKind::Reshape { .. } => {
                let back = g.clone().reshape(inp(0).value.shape()).expect("same numel");
                vec![Some(back)]
            }
        }
    }
}
