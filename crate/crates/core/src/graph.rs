//! Reverse-mode autodiff over a flat, topologically ordered node list.
//!
//! Graphs are built per batch: leaves carry copies of parameter and input
//! values, ops append nodes in construction order, and `backward` walks the
//! list in exact reverse order, accumulating gradients additively. The node
//! list doubles as a recomputable forward program, which is what the
//! finite-difference harness in [`crate::gradcheck`] perturbs.

use crate::derotation::{
    derotate_backward, derotate_forward, normalize_pose, rotation_loss, rotation_loss_backward,
    DerotationRecord, RotationVector,
};
use crate::error::{CoreError, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    Relu,
    MaxPool2 { argmax: Vec<usize> },
    FullyConnected,
    SoftmaxXent { labels: Tensor, probs: Tensor },
    Derotate { record: DerotationRecord },
    RotationLoss(RotationLossState),
    Add,
    WeightedSum { weights: Vec<f64> },
}

struct RotationLossState {
    targets: Vec<RotationVector>,
    /// Per-row mask; false rows (negatives) contribute neither loss nor gradient.
    mask: Vec<bool>,
    positives: usize,
    degenerate: usize,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    grad: Vec<f64>,
}

#[derive(Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    degenerate_poses: usize,
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> NodeRef {
        let grad_len = value.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: vec![0.0; grad_len],
        });
        NodeRef(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeRef {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn value(&self, n: NodeRef) -> &Tensor {
        &self.nodes[n.0].value
    }

    /// Overwrite a leaf's value; callers must `recompute` afterwards.
    pub fn set_leaf_value(&mut self, n: NodeRef, values: &[f64]) {
        debug_assert!(matches!(self.nodes[n.0].op, Op::Leaf));
        self.nodes[n.0].value.values_mut().copy_from_slice(values);
    }

    pub fn grad(&self, n: NodeRef) -> &[f64] {
        &self.nodes[n.0].grad
    }

    /// Count of (c, s) = (0, 0) rows encountered by rotation-loss nodes,
    /// which are treated as angle 0 and skipped in the gradient.
    pub fn degenerate_pose_count(&self) -> usize {
        self.degenerate_poses
    }

    pub fn conv2d(
        &mut self,
        input: NodeRef,
        weights: NodeRef,
        bias: NodeRef,
        stride: usize,
        pad: usize,
    ) -> Result<NodeRef> {
        let out = ops::conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[weights.0].value,
            &self.nodes[bias.0].value,
            stride,
            pad,
        )?;
        Ok(self.push(
            Op::Conv2d { stride, pad },
            vec![input.0, weights.0, bias.0],
            out,
        ))
    }

    pub fn relu(&mut self, input: NodeRef) -> NodeRef {
        let out = ops::relu_forward(&self.nodes[input.0].value);
        self.push(Op::Relu, vec![input.0], out)
    }

    pub fn maxpool2(&mut self, input: NodeRef) -> NodeRef {
        let (out, argmax) = ops::maxpool2_forward(&self.nodes[input.0].value);
        self.push(Op::MaxPool2 { argmax }, vec![input.0], out)
    }

    pub fn fully_connected(
        &mut self,
        input: NodeRef,
        weights: NodeRef,
        bias: NodeRef,
    ) -> Result<NodeRef> {
        let out = ops::fully_connected_forward(
            &self.nodes[input.0].value,
            &self.nodes[weights.0].value,
            &self.nodes[bias.0].value,
        )?;
        Ok(self.push(Op::FullyConnected, vec![input.0, weights.0, bias.0], out))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeRef, labels: Tensor) -> Result<NodeRef> {
        let r = ops::softmax_cross_entropy_forward(&self.nodes[logits.0].value, &labels)?;
        Ok(self.push(
            Op::SoftmaxXent {
                labels,
                probs: r.probs,
            },
            vec![logits.0],
            Tensor::scalar(r.loss),
        ))
    }

    pub fn derotate(&mut self, feature: NodeRef, poses: &[RotationVector]) -> Result<NodeRef> {
        let (out, record) = derotate_forward(&self.nodes[feature.0].value, poses)?;
        Ok(self.push(Op::Derotate { record }, vec![feature.0], out))
    }

    /// Mean squared pose distance over the masked (positive) rows of an
    /// (n, 2) raw-output tensor. Negatives contribute no loss or gradient.
    pub fn rotation_loss(
        &mut self,
        raw: NodeRef,
        targets: Vec<RotationVector>,
        mask: Vec<bool>,
    ) -> Result<NodeRef> {
        let value = &self.nodes[raw.0].value;
        let n = value.shape()[0];
        if value.shape() != [n, 2] || targets.len() != n || mask.len() != n {
            return Err(CoreError::ShapeMismatch {
                context: "rotation_loss",
                expected: format!("(n, 2) raw outputs with {} targets and masks", n),
                got: format!(
                    "{:?} with {} targets, {} masks",
                    value.shape(),
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let positives = mask.iter().filter(|&&m| m).count();
        let mut loss = 0.0;
        let mut degenerate = 0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let (c, s) = (value.values()[2 * i], value.values()[2 * i + 1]);
            match normalize_pose(c, s) {
                Ok(l) => loss += rotation_loss(&l, &targets[i]),
                Err(_) => {
                    // measure-zero event: score as angle 0, skip its gradient
                    degenerate += 1;
                    loss += rotation_loss(&RotationVector::identity(), &targets[i]);
                }
            }
        }
        if positives > 0 {
            loss /= positives as f64;
        }
        self.degenerate_poses += degenerate;
        let state = RotationLossState {
            targets,
            mask,
            positives,
            degenerate,
        };
        Ok(self.push(Op::RotationLoss(state), vec![raw.0], Tensor::scalar(loss)))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let v = self.nodes[a.0].value.item() + self.nodes[b.0].value.item();
        self.push(Op::Add, vec![a.0, b.0], Tensor::scalar(v))
    }

    /// Fixed-coefficient contraction of a tensor to a scalar.
    pub fn weighted_sum(&mut self, input: NodeRef, weights: Vec<f64>) -> Result<NodeRef> {
        let value = &self.nodes[input.0].value;
        if weights.len() != value.len() {
            return Err(CoreError::ShapeMismatch {
                context: "weighted_sum",
                expected: format!("{} weights", value.len()),
                got: format!("{}", weights.len()),
            });
        }
        let v: f64 = value.values().iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push(
            Op::WeightedSum { weights },
            vec![input.0],
            Tensor::scalar(v),
        ))
    }

    /// Re-run the forward program from current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        self.degenerate_poses = 0;
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let input = |k: usize| &before[node.inputs[k]].value;
            match &mut node.op {
                Op::Leaf => {}
                Op::Conv2d { stride, pad } => {
                    node.value = ops::conv2d_forward(input(0), input(1), input(2), *stride, *pad)?;
                }
                Op::Relu => node.value = ops::relu_forward(input(0)),
                Op::MaxPool2 { argmax } => {
                    let (out, am) = ops::maxpool2_forward(input(0));
                    node.value = out;
                    *argmax = am;
                }
                Op::FullyConnected => {
                    node.value = ops::fully_connected_forward(input(0), input(1), input(2))?;
                }
                Op::SoftmaxXent { labels, probs } => {
                    let r = ops::softmax_cross_entropy_forward(input(0), labels)?;
                    node.value = Tensor::scalar(r.loss);
                    *probs = r.probs;
                }
                Op::Derotate { record } => {
                    // geometry depends only on poses, which are fixed data
                    let plane: usize = input(0).shape()[2] * input(0).shape()[3];
                    let [n, c, ..] = record.shape();
                    let mut out = Tensor::zeros(input(0).shape());
                    let iv = input(0).values();
                    let ov = out.values_mut();
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            for cell in 0..plane {
                                let mut acc = 0.0;
                                for t in record.taps(bi, cell) {
                                    if t.index != usize::MAX {
                                        acc += t.weight * iv[base + t.index];
                                    }
                                }
                                ov[base + cell] = acc;
                            }
                        }
                    }
                    node.value = out;
                }
                Op::RotationLoss(state) => {
                    let v = input(0).values();
                    let mut loss = 0.0;
                    state.degenerate = 0;
                    for i in 0..state.mask.len() {
                        if !state.mask[i] {
                            continue;
                        }
                        match normalize_pose(v[2 * i], v[2 * i + 1]) {
                            Ok(l) => loss += rotation_loss(&l, &state.targets[i]),
                            Err(_) => {
                                state.degenerate += 1;
                                loss += rotation_loss(
                                    &RotationVector::identity(),
                                    &state.targets[i],
                                );
                            }
                        }
                    }
                    if state.positives > 0 {
                        loss /= state.positives as f64;
                    }
                    self.degenerate_poses += state.degenerate;
                    node.value = Tensor::scalar(loss);
                }
                Op::Add => {
                    let v = before[node.inputs[0]].value.item() + before[node.inputs[1]].value.item();
                    node.value = Tensor::scalar(v);
                }
                Op::WeightedSum { weights } => {
                    let v: f64 = input(0)
                        .values()
                        .iter()
                        .zip(weights.iter())
                        .map(|(x, w)| x * w)
                        .sum();
                    node.value = Tensor::scalar(v);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Reverse sweep from one scalar node, seeding its gradient with 1.
    pub fn backward(&mut self, from: NodeRef) -> Result<()> {
        self.backward_multi(&[from])
    }

    /// Reverse sweep seeding several scalar roots at once (e.g. the two loss
    /// heads of the joint model); gradients sum where paths merge.
    pub fn backward_multi(&mut self, roots: &[NodeRef]) -> Result<()> {
        self.zero_grads();
        for root in roots {
            if self.nodes[root.0].value.len() != 1 {
                return Err(CoreError::invalid(
                    "backward",
                    format!(
                        "root node must be scalar, got shape {:?}",
                        self.nodes[root.0].value.shape()
                    ),
                ));
            }
            self.nodes[root.0].grad[0] += 1.0;
        }

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let input = |k: usize| &before[node.inputs[k]].value;
            let contributions: Vec<(usize, Vec<f64>)> = match &node.op {
                Op::Leaf => vec![],
                Op::Conv2d { stride, pad } => {
                    let g = ops::conv2d_backward(&node.grad, input(0), input(1), *stride, *pad);
                    vec![
                        (node.inputs[0], g.input.into_values()),
                        (node.inputs[1], g.weights.into_values()),
                        (node.inputs[2], g.bias.into_values()),
                    ]
                }
                Op::Relu => vec![(node.inputs[0], ops::relu_backward(&node.grad, input(0)))],
                Op::MaxPool2 { argmax } => vec![(
                    node.inputs[0],
                    ops::maxpool2_backward(&node.grad, argmax, input(0).len()),
                )],
                Op::FullyConnected => {
                    let g = ops::fully_connected_backward(&node.grad, input(0), input(1));
                    vec![
                        (node.inputs[0], g.input.into_values()),
                        (node.inputs[1], g.weights.into_values()),
                        (node.inputs[2], g.bias.into_values()),
                    ]
                }
                Op::SoftmaxXent { labels, probs } => vec![(
                    node.inputs[0],
                    ops::softmax_cross_entropy_backward(node.grad[0], probs, labels),
                )],
                Op::Derotate { record } => {
                    let g = Tensor::from_values(input(0).shape(), node.grad.clone())?;
                    vec![(node.inputs[0], derotate_backward(&g, record)?.into_values())]
                }
                Op::RotationLoss(state) => {
                    let v = input(0).values();
                    let mut g = vec![0.0; v.len()];
                    if state.positives > 0 {
                        let scale = node.grad[0] / state.positives as f64;
                        for i in 0..state.mask.len() {
                            if !state.mask[i] {
                                continue;
                            }
                            let (c, s) = (v[2 * i], v[2 * i + 1]);
                            if let Ok((dc, ds)) =
                                rotation_loss_backward(c, s, &state.targets[i])
                            {
                                g[2 * i] = scale * dc;
                                g[2 * i + 1] = scale * ds;
                            }
                        }
                    }
                    vec![(node.inputs[0], g)]
                }
                Op::Add => vec![
                    (node.inputs[0], vec![node.grad[0]]),
                    (node.inputs[1], vec![node.grad[0]]),
                ],
                Op::WeightedSum { weights } => vec![(
                    node.inputs[0],
                    weights.iter().map(|w| w * node.grad[0]).collect(),
                )],
            };
            for (idx, grad) in contributions {
                let dst = &mut before[idx].grad;
                for (d, g) in dst.iter_mut().zip(&grad) {
                    *d += g;
                }
            }
        }
        Ok(())
    }
}
