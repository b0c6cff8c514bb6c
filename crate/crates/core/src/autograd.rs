//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied to [`Var`] handles; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every node that requires one.

use std::collections::BTreeMap;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{ParamSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    Depthwise { x: Var, k: Var, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Concat(Vec<Var>),
    Select { x: Var, index: usize },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    RoiAlign { fmap: Var, bbox: BBox, stride: f64, out: usize },
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    BceLogits { z: Var, targets: Vec<f64> },
    SmoothL1 { x: Var, target: Vec<f64>, beta: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Every parameter of a [`ParamSet`] placed on a graph as a leaf.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, key: &str) -> Result<Var> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{key}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects per-parameter gradients into a [`ParamSet`]-shaped map.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, g.value(v).shape())))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created at or after position `len`; vars created
    /// before that stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn bind(&mut self, params: &ParamSet, requires_grad: bool) -> Bound {
        Bound {
            vars: params
                .iter()
                .map(|(k, t)| (k.clone(), self.push_leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Binds every parameter, tracking gradients only for keys accepted by
    /// `trainable`.
    pub fn bind_where(&mut self, params: &ParamSet, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: params
                .iter()
                .map(|(k, t)| (k.clone(), self.push_leaf(t.clone(), trainable(k))))
                .collect(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = nn::conv2d(self.value(x), self.value(k), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, k, b, stride, pad }, &[x, k, b]))
    }

    pub fn depthwise(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let y = nn::depthwise_correlate(self.value(x), self.value(k), pad)?;
        Ok(self.push(y, Op::Depthwise { x, k, pad }, &[x, k]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = nn::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip(a, b, |x, y| x + y);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip(a, b, |x, y| x - y);
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip(a, b, |x, y| x * y);
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).scale(s);
        self.push(y, Op::Scale(a, s), &[a])
    }

    /// Sum of equally shaped vars.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mean_n(&mut self, vars: &[Var]) -> Result<Var> {
        let s = self.add_n(vars)?;
        Ok(self.scale(s, 1.0 / vars.len() as f64))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.max(0.0));
        self.push(y, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(nn::sigmoid);
        self.push(y, Op::Sigmoid(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = nn::softmax(self.value(a), axis)?;
        Ok(self.push(y, Op::Softmax { x: a, axis }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a), &[a]))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, [n]).expect("flatten preserves element count")
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: {:?} vs trailing {tail:?}",
                    t.shape()
                )));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks equally shaped vars along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let lifted = parts
            .iter()
            .map(|&p| {
                let mut s = vec![1];
                s.extend_from_slice(self.value(p).shape());
                self.reshape(p, s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&lifted)
    }

    /// Slice `index` along axis 0, dropping that axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let lead = t.shape()[0];
        if index >= lead {
            return Err(Error::shape(format!("select {index} from axis of {lead}")));
        }
        let shape = if t.shape().len() > 1 {
            t.shape()[1..].to_vec()
        } else {
            vec![1]
        };
        let n: usize = shape.iter().product();
        let y = Tensor::from_parts(shape, t.data()[index * n..(index + 1) * n].to_vec());
        Ok(self.push(y, Op::Select { x: a, index }, &[a]))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let y = nn::avg_pool2(self.value(a))?;
        Ok(self.push(y, Op::AvgPool2(a), &[a]))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let y = nn::global_avg_pool(self.value(a))?;
        Ok(self.push(y, Op::GlobalAvgPool(a), &[a]))
    }

    /// ROI-align; the box is a constant, gradients flow into the feature map.
    pub fn roi_align(&mut self, fmap: Var, bbox: BBox, stride: f64, out: usize) -> Result<Var> {
        let y = nn::roi_align(self.value(fmap), &bbox, stride, out)?;
        Ok(self.push(y, Op::RoiAlign { fmap, bbox, stride, out }, &[fmap]))
    }

    /// Picks flat elements `idx` into a vector.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape(format!("gather index {bad} out of {}", t.len())));
        }
        let y = Tensor::from_parts(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect());
        Ok(self.push(y, Op::Gather { x: a, idx }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Summed binary cross-entropy of `sigmoid(z)` against `targets`, computed
    /// from logits.
    pub fn bce_with_logits(&mut self, z: Var, targets: Vec<f64>) -> Result<Var> {
        let t = self.value(z);
        if t.len() != targets.len() {
            return Err(Error::shape(format!(
                "bce: {} logits, {} targets",
                t.len(),
                targets.len()
            )));
        }
        let loss: f64 = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { z, targets }, &[z]))
    }

    /// Summed smooth-L1 (Huber with transition `beta`) between `x` and `target`.
    pub fn smooth_l1(&mut self, x: Var, target: Vec<f64>, beta: f64) -> Result<Var> {
        let t = self.value(x);
        if t.len() != target.len() {
            return Err(Error::shape(format!(
                "smooth_l1: {} predictions, {} targets",
                t.len(),
                target.len()
            )));
        }
        let loss: f64 = t
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &y)| {
                let d = (p - y).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { x, target, beta }, &[x]))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            let contributions = self.vjp(node, &go)?;
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, go: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, b, stride, pad } => {
                let (dx, dk, db) = nn::conv2d_backward(val(*x), val(*k), *stride, *pad, go)?;
                vec![(*x, dx), (*k, dk), (*b, db)]
            }
            Op::Depthwise { x, k, pad } => {
                let (dx, dk) = nn::depthwise_correlate_backward(val(*x), val(*k), *pad, go)?;
                vec![(*x, dx), (*k, dk)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = nn::linear_backward(val(*x), val(*w), go)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, go.clone()), (*b, go.clone())],
            Op::Sub(a, b) => vec![(*a, go.clone()), (*b, go.scale(-1.0))],
            Op::Mul(a, b) => {
                let da = mul_t(go, val(*b));
                let db = mul_t(go, val(*a));
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, go.scale(*s))],
            Op::Relu(a) => {
                let x = val(*a);
                let d = x.data().iter().zip(go.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 });
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), d.collect()))]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = y.data().iter().zip(go.data()).map(|(&y, &g)| g * y * (1.0 - y));
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d.collect()))]
            }
            Op::Softmax { x, axis } => vec![(*x, nn::softmax_backward(&node.value, *axis, go)?)],
            Op::Reshape(a) => vec![(*a, go.clone().reshape(val(*a).shape().to_vec())?)],
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let t = val(p);
                        let g = Tensor::from_parts(t.shape().to_vec(), go.data()[offset..offset + t.len()].to_vec());
                        offset += t.len();
                        (p, g)
                    })
                    .collect()
            }
            Op::Select { x, index } => {
                let t = val(*x);
                let n = go.len();
                let mut d = vec![0.0; t.len()];
                d[index * n..(index + 1) * n].copy_from_slice(go.data());
                vec![(*x, Tensor::from_parts(t.shape().to_vec(), d))]
            }
            Op::AvgPool2(a) => vec![(*a, nn::avg_pool2_backward(val(*a).shape(), go))],
            Op::GlobalAvgPool(a) => {
                let t = val(*a);
                let (c, h, w) = t.dims3()?;
                let n = (h * w) as f64;
                let d = (0..c * h * w).map(|i| go.data()[i / (h * w)] / n).collect();
                vec![(*a, Tensor::from_parts(vec![c, h, w], d))]
            }
            Op::RoiAlign { fmap, bbox, stride, out } => {
                vec![(*fmap, nn::roi_align_backward(val(*fmap).shape(), bbox, *stride, *out, go))]
            }
            Op::Gather { x, idx } => {
                let t = val(*x);
                let mut d = vec![0.0; t.len()];
                for (&i, &g) in idx.iter().zip(go.data()) {
                    d[i] += g;
                }
                vec![(*x, Tensor::from_parts(t.shape().to_vec(), d))]
            }
            Op::Sum(a) => {
                let t = val(*a);
                vec![(*a, Tensor::full(t.shape().to_vec(), go.data()[0]))]
            }
            Op::BceLogits { z, targets } => {
                let t = val(*z);
                let g0 = go.data()[0];
                let d = t.data().iter().zip(targets).map(|(&z, &y)| g0 * (nn::sigmoid(z) - y));
                vec![(*z, Tensor::from_parts(t.shape().to_vec(), d.collect()))]
            }
            Op::SmoothL1 { x, target, beta } => {
                let t = val(*x);
                let g0 = go.data()[0];
                let d = t.data().iter().zip(target).map(|(&p, &y)| {
                    let diff = p - y;
                    if diff.abs() < *beta {
                        g0 * diff / beta
                    } else {
                        g0 * diff.signum()
                    }
                });
                vec![(*x, Tensor::from_parts(t.shape().to_vec(), d.collect()))]
            }
        };
        Ok(out)
    }
}

fn mul_t(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_parts(a.shape().to_vec(), d)
}
