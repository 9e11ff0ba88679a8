//! Reverse-mode autodiff over [`crate::tensor`] ops.
//!
//! A [`Graph`] is a tape: ops append nodes that reference earlier nodes, so
//! creation order is already topological and the backward pass is a single
//! reverse sweep visiting each node once. Gradients accumulate only on leaves
//! with `requires_grad` (parameters, or inputs a test opts in); interior flow
//! buffers are dropped as the sweep passes them.
//!
//! Calling [`Graph::backward`] twice without [`Graph::zero_grad`] adds the
//! gradients again (so a leaf ends up with 2x), matching the usual
//! accumulate-into-grad contract.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Conv2dSpec, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `mul * x + add`, scalar coefficients.
    Affine { x: NodeId, mul: f64 },
    Sigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Conv2d { x: NodeId, k: NodeId, bias: Option<NodeId>, spec: Conv2dSpec },
    BilinearUp { x: NodeId, scale: usize },
    AvgPool2(NodeId),
    ChannelMean(NodeId),
    ChannelSum(NodeId),
    ChannelMax(NodeId),
    GlobalAvgPool(NodeId),
    GlobalMaxPool(NodeId),
    ConcatC(Vec<NodeId>),
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mean: Tensor, var: Tensor },
    BnEval { x: NodeId, gamma: NodeId, beta: NodeId, rm: Tensor, rv: Tensor, eps: f64 },
    /// Mean over all elements of the stable-logit binary cross entropy
    /// against a constant target.
    BceWithLogits { logits: NodeId, target: Tensor },
    /// `1 - 2*sum(p*g) / (sum(p) + sum(g) + 1)` on probabilities.
    SoftDice { probs: NodeId, target: Tensor },
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients for `requires_grad` leaves, keyed by node index.
    leaf_grads: BTreeMap<usize, Tensor>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient (inputs, fixed kernels, targets).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` before any
    /// backward pass reached it or if the leaf doesn't track gradients.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.leaf_grads.get(&id.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- op builders ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_t(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub_t(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul_t(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(x).affine(mul, add);
        self.push(v, Op::Affine { x, mul }, self.rg(x))
    }

    /// `1 - x`, the reverse-attention complement.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sigmoid();
        self.push(v, Op::Sigmoid(x), self.rg(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        self.push(v, Op::Relu(x), self.rg(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).abs_map();
        self.push(v, Op::Abs(x), self.rg(x))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, bias: Option<NodeId>, spec: Conv2dSpec) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(x), self.value(k), bias.map(|b| self.value(b)), spec)?;
        let rg = self.rg(x) || self.rg(k) || bias.map_or(false, |b| self.rg(b));
        Ok(self.push(v, Op::Conv2d { x, k, bias, spec }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: NodeId, scale: usize) -> Result<NodeId> {
        let v = tensor::bilinear_upsample(self.value(x), scale)?;
        Ok(self.push(v, Op::BilinearUp { x, scale }, self.rg(x)))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::avg_pool2(self.value(x))?;
        Ok(self.push(v, Op::AvgPool2(x), self.rg(x)))
    }

    pub fn channel_mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).channel_mean();
        self.push(v, Op::ChannelMean(x), self.rg(x))
    }

    pub fn channel_sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).channel_sum();
        self.push(v, Op::ChannelSum(x), self.rg(x))
    }

    pub fn channel_max(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).channel_max();
        self.push(v, Op::ChannelMax(x), self.rg(x))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).global_avg_pool();
        self.push(v, Op::GlobalAvgPool(x), self.rg(x))
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).global_max_pool();
        self.push(v, Op::GlobalMaxPool(x), self.rg(x))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_channels(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatC(parts.to_vec()), rg))
    }

    /// Train-mode batch norm. Running stats come in as plain tensors and the
    /// updated ones are handed back for the caller to commit after the step.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        momentum: f64,
        eps: f64,
    ) -> Result<(NodeId, Tensor, Tensor)> {
        let out = tensor::batch_norm_train(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            momentum,
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            out.y,
            Op::BnTrain { x, gamma, beta, eps, mean: out.batch_mean, var: out.batch_var },
            rg,
        );
        Ok((id, out.new_running_mean, out.new_running_var))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        let v = tensor::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::BnEval {
                x,
                gamma,
                beta,
                rm: running_mean.clone(),
                rv: running_var.clone(),
                eps,
            },
            rg,
        ))
    }

    /// Mean binary cross entropy against a constant target, computed from
    /// logits in the stable form `max(z,0) - z*g + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", z.shape(), target.shape()),
            ));
        }
        let n = z.numel() as f64;
        let mut acc = 0.0;
        for (&zv, &g) in z.data().iter().zip(target.data()) {
            acc += zv.max(0.0) - zv * g + (-zv.abs()).exp().ln_1p();
        }
        let v = Tensor::scalar(acc / n);
        Ok(self.push(v, Op::BceWithLogits { logits, target: target.clone() }, self.rg(logits)))
    }

    /// Soft Dice loss on probabilities: `1 - 2*sum(p*g) / (sum(p)+sum(g)+1)`.
    pub fn soft_dice(&mut self, probs: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(probs);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "soft_dice",
                format!("probs {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let s_pg: f64 = p.data().iter().zip(target.data()).map(|(&a, &b)| a * b).sum();
        let s_p: f64 = p.data().iter().sum();
        let s_g: f64 = target.data().iter().sum();
        let v = Tensor::scalar(1.0 - 2.0 * s_pg / (s_p + s_g + 1.0));
        Ok(self.push(v, Op::SoftDice { probs, target: target.clone() }, self.rg(probs)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), self.rg(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::MeanAll(x), self.rg(x))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad` leaves
    /// are ADDED to whatever previous backward calls left there.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ln = self.nodes[loss.0].value.numel();
        if ln != 1 {
            return Err(Error::Autodiff(format!("backward needs a scalar loss, got {} elements", ln)));
        }
        if !self.rg(loss) {
            return Err(Error::Autodiff("loss does not depend on any tracked leaf".into()));
        }
        let mut flow: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        flow[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                flow[i] = None;
                continue;
            }
            let Some(g) = flow[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => {
                            for (a, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += gv;
                            }
                        }
                        None => {
                            self.leaf_grads.insert(i, g);
                        }
                    }
                    continue;
                }
                op => {
                    let contributions = self.op_backward(i, op, &g)?;
                    for (pid, pg) in contributions {
                        if !self.nodes[pid.0].requires_grad {
                            continue;
                        }
                        match flow[pid.0].as_mut() {
                            Some(acc) => {
                                for (a, gv) in acc.data_mut().iter_mut().zip(pg.data()) {
                                    *a += gv;
                                }
                            }
                            None => flow[pid.0] = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-op gradient rules for node `i`. Returns (parent, contribution) pairs.
    fn op_backward(&self, i: usize, op: &Op, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        use Op::*;
        Ok(match op {
            Leaf => vec![],
            Add(a, b) => {
                let ga = tensor::reduce_to_shape(g, self.value(*a).shape());
                let gb = tensor::reduce_to_shape(g, self.value(*b).shape());
                vec![(*a, ga), (*b, gb)]
            }
            Sub(a, b) => {
                let ga = tensor::reduce_to_shape(g, self.value(*a).shape());
                let gb = tensor::reduce_to_shape(g, self.value(*b).shape()).scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Mul(a, b) => {
                let ga = tensor::reduce_to_shape(&g.mul_t(self.value(*b))?, self.value(*a).shape());
                let gb = tensor::reduce_to_shape(&g.mul_t(self.value(*a))?, self.value(*b).shape());
                vec![(*a, ga), (*b, gb)]
            }
            Affine { x, mul } => vec![(*x, g.scale(*mul))],
            Sigmoid(x) => {
                // y(1 - y) from the cached output.
                let y = &self.nodes[i].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect(),
                )?;
                vec![(*x, gx)]
            }
            Relu(x) => {
                let xin = self.value(*x);
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xin.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )?;
                vec![(*x, gx)]
            }
            Abs(x) => {
                let xin = self.value(*x);
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xin.data())
                        .map(|(&gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                        .collect(),
                )?;
                vec![(*x, gx)]
            }
            Conv2d { x, k, bias, spec } => {
                let need_x = self.rg(*x);
                let need_k = self.rg(*k);
                let need_b = bias.map_or(false, |b| self.rg(b));
                let (gx, gk, gb) =
                    tensor::conv2d_backward(self.value(*x), self.value(*k), *spec, g, need_x, need_k, need_b);
                let mut out = vec![];
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gk) = gk {
                    out.push((*k, gk));
                }
                if let (Some(gb), Some(b)) = (gb, bias) {
                    out.push((*b, gb));
                }
                out
            }
            BilinearUp { x, scale } => {
                vec![(*x, tensor::bilinear_upsample_backward(self.value(*x).shape(), *scale, g))]
            }
            AvgPool2(x) => vec![(*x, tensor::avg_pool2_backward(self.value(*x).shape(), g))],
            ChannelMean(x) => {
                let (bn, cn, h, w) = self.value(*x).dims();
                let inv = 1.0 / cn as f64;
                let mut gx = Tensor::zeros([bn, cn, h, w]);
                for b in 0..bn {
                    let gp = g.plane(b, 0);
                    for c in 0..cn {
                        let base = (b * cn + c) * h * w;
                        for (j, &gv) in gp.iter().enumerate() {
                            gx.data_mut()[base + j] = gv * inv;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            ChannelSum(x) => {
                let (bn, cn, h, w) = self.value(*x).dims();
                let mut gx = Tensor::zeros([bn, cn, h, w]);
                for b in 0..bn {
                    let gp = g.plane(b, 0);
                    for c in 0..cn {
                        let base = (b * cn + c) * h * w;
                        for (j, &gv) in gp.iter().enumerate() {
                            gx.data_mut()[base + j] = gv;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            ChannelMax(x) => {
                // Route to the first channel attaining the max per position.
                let xin = self.value(*x);
                let (bn, cn, h, w) = xin.dims();
                let mut gx = Tensor::zeros([bn, cn, h, w]);
                for b in 0..bn {
                    let gp = g.plane(b, 0);
                    for j in 0..h * w {
                        let mut best_c = 0;
                        let mut best = xin.plane(b, 0)[j];
                        for c in 1..cn {
                            let v = xin.plane(b, c)[j];
                            if v > best {
                                best = v;
                                best_c = c;
                            }
                        }
                        gx.data_mut()[(b * cn + best_c) * h * w + j] = gp[j];
                    }
                }
                vec![(*x, gx)]
            }
            GlobalAvgPool(x) => {
                let (bn, cn, h, w) = self.value(*x).dims();
                let inv = 1.0 / (h * w) as f64;
                let mut gx = Tensor::zeros([bn, cn, h, w]);
                for b in 0..bn {
                    for c in 0..cn {
                        let gv = g.at(b, c, 0, 0) * inv;
                        let base = (b * cn + c) * h * w;
                        gx.data_mut()[base..base + h * w].fill(gv);
                    }
                }
                vec![(*x, gx)]
            }
            GlobalMaxPool(x) => {
                let xin = self.value(*x);
                let (bn, cn, h, w) = xin.dims();
                let mut gx = Tensor::zeros([bn, cn, h, w]);
                for b in 0..bn {
                    for c in 0..cn {
                        let p = xin.plane(b, c);
                        let mut best = 0;
                        for j in 1..h * w {
                            if p[j] > p[best] {
                                best = j;
                            }
                        }
                        gx.data_mut()[(b * cn + c) * h * w + best] = g.at(b, c, 0, 0);
                    }
                }
                vec![(*x, gx)]
            }
            ConcatC(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    out.push((p, tensor::slice_channels(g, c0, c0 + pc)?));
                    c0 += pc;
                }
                out
            }
            BnTrain { x, gamma, beta, eps, mean, var } => {
                let (gx, gg, gb) = tensor::batch_norm_train_backward(
                    self.value(*x),
                    self.value(*gamma),
                    mean,
                    var,
                    *eps,
                    g,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            BnEval { x, gamma, beta, rm, rv, eps } => {
                let (gx, gg, gb) =
                    tensor::batch_norm_eval_backward(self.value(*x), self.value(*gamma), rm, rv, *eps, g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            BceWithLogits { logits, target } => {
                let z = self.value(*logits);
                let n = z.numel() as f64;
                let gs = g.data()[0];
                let gx = Tensor::from_vec(
                    z.shape(),
                    z.data()
                        .iter()
                        .zip(target.data())
                        .map(|(&zv, &t)| gs * (tensor::sigmoid_scalar(zv) - t) / n)
                        .collect(),
                )?;
                vec![(*logits, gx)]
            }
            SoftDice { probs, target } => {
                let p = self.value(*probs);
                let s_pg: f64 = p.data().iter().zip(target.data()).map(|(&a, &b)| a * b).sum();
                let s_p: f64 = p.data().iter().sum();
                let s_g: f64 = target.data().iter().sum();
                let d = s_p + s_g + 1.0;
                let gs = g.data()[0];
                let gx = Tensor::from_vec(
                    p.shape(),
                    target
                        .data()
                        .iter()
                        .map(|&t| gs * (-2.0) * (t * d - s_pg) / (d * d))
                        .collect(),
                )?;
                vec![(*probs, gx)]
            }
            SumAll(x) => {
                vec![(*x, Tensor::full(self.value(*x).shape(), g.data()[0]))]
            }
            MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                vec![(*x, Tensor::full(self.value(*x).shape(), g.data()[0] / n))]
            }
        })
    }

}

// ===== named parameters, SGD =====

/// Named tensor collection: model parameters, buffers, or velocities.
/// BTreeMap keeps iteration deterministic everywhere (census, checkpoints,
/// gradient checks).
#[derive(Clone, Default, Debug, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(self.map.insert(name.clone(), t).is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        *self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")) = t;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn total_elems(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }
}

/// Register every parameter as a grad-tracking leaf; returns name -> node.
pub fn leaf_params(graph: &mut Graph, params: &ParamStore) -> BTreeMap<String, NodeId> {
    params.iter().map(|(n, t)| (n.to_string(), graph.leaf(t.clone(), true))).collect()
}

/// Pull accumulated leaf gradients back out by parameter name. Parameters the
/// loss never touched get zeros.
pub fn collect_grads(
    graph: &Graph,
    ids: &BTreeMap<String, NodeId>,
    params: &ParamStore,
) -> BTreeMap<String, Tensor> {
    ids.iter()
        .map(|(name, &id)| {
            let g = graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape()));
            (name.clone(), g)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Classic momentum SGD with L2-coupled weight decay:
///   v <- momentum * v + (g + weight_decay * theta)
///   theta <- theta - lr * v
/// The decay joins the gradient before the momentum buffer, not after.
pub fn sgd_step(
    params: &mut ParamStore,
    velocity: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    cfg: SgdConfig,
) -> Result<()> {
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let theta = params.get_mut(&name).unwrap();
        if !velocity.contains(&name) {
            velocity.insert(name.clone(), Tensor::zeros(theta.shape()));
        }
        let v = velocity.get_mut(&name).unwrap();
        if v.shape() != theta.shape() {
            return Err(Error::Autodiff(format!(
                "velocity shape {:?} does not match parameter {} {:?}",
                v.shape(),
                name,
                theta.shape()
            )));
        }
        let zero;
        let g = match grads.get(&name) {
            Some(g) => {
                if g.shape() != theta.shape() {
                    return Err(Error::Autodiff(format!(
                        "gradient shape {:?} does not match parameter {} {:?}",
                        g.shape(),
                        name,
                        theta.shape()
                    )));
                }
                g
            }
            None => {
                zero = Tensor::zeros(theta.shape());
                &zero
            }
        };
        for i in 0..theta.numel() {
            let gv = g.data()[i] + cfg.weight_decay * theta.data()[i];
            let nv = cfg.momentum * v.data()[i] + gv;
            v.data_mut()[i] = nv;
            theta.data_mut()[i] -= cfg.lr * nv;
        }
    }
    Ok(())
}

/// He-uniform init for a conv kernel: U(-b, b) with b = sqrt(6 / fan_in),
/// fan_in = in_channels_per_group * kh * kw.
pub fn kaiming_conv(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

// ===== layer plumbing shared by the wega block and the model =====

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    Train { momentum: f64 },
    Eval,
}

/// Everything a layer needs to build itself onto the tape: parameter nodes
/// by name, batch-norm buffers, and a place to stage buffer updates that the
/// trainer commits after the step (train mode only).
pub struct NetCtx<'a> {
    pub g: &'a mut Graph,
    pub ids: &'a BTreeMap<String, NodeId>,
    pub buffers: &'a ParamStore,
    pub mode: BnMode,
    /// (buffer name, new value) pairs staged by train-mode batch norms.
    pub bn_updates: Vec<(String, Tensor)>,
}

impl<'a> NetCtx<'a> {
    pub fn new(
        g: &'a mut Graph,
        ids: &'a BTreeMap<String, NodeId>,
        buffers: &'a ParamStore,
        mode: BnMode,
    ) -> Self {
        Self { g, ids, buffers, mode, bn_updates: Vec::new() }
    }

    pub fn param(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Autodiff(format!("parameter {name} not registered on the graph")))
    }

    fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Autodiff(format!("buffer {name} missing")))
    }

    /// Batch norm layer at `{prefix}.gamma/.beta` with running stats at
    /// `{prefix}.running_mean/.running_var`.
    pub fn batch_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let rm_name = format!("{prefix}.running_mean");
        let rv_name = format!("{prefix}.running_var");
        let rm = self.buffer(&rm_name)?.clone();
        let rv = self.buffer(&rv_name)?.clone();
        match self.mode {
            BnMode::Train { momentum } => {
                let (y, new_rm, new_rv) =
                    self.g.batch_norm_train(x, gamma, beta, &rm, &rv, momentum, BN_EPS)?;
                self.bn_updates.push((rm_name, new_rm));
                self.bn_updates.push((rv_name, new_rv));
                Ok(y)
            }
            BnMode::Eval => self.g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS),
        }
    }

    /// Bias-free conv named `{prefix}.conv.weight`.
    pub fn conv(&mut self, x: NodeId, prefix: &str, spec: Conv2dSpec) -> Result<NodeId> {
        let k = self.param(&format!("{prefix}.conv.weight"))?;
        self.g.conv2d(x, k, None, spec)
    }

    /// conv3x3(pad 1, no bias) -> BN -> ReLU under `{prefix}`.
    pub fn conv_bn_relu(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let c = self.conv(x, prefix, Conv2dSpec::padded(1))?;
        let n = self.batch_norm(c, &format!("{prefix}.bn"))?;
        Ok(self.g.relu(n))
    }
}

/// Register a Kaiming-initialized conv kernel parameter.
pub fn init_conv(params: &mut ParamStore, name: &str, shape: [usize; 4], rng: &mut impl Rng) {
    params.insert(format!("{name}.conv.weight"), kaiming_conv(shape, rng));
}

/// Register batch-norm parameters (gamma = 1, beta = 0) and buffers
/// (mean 0, var 1) for `c` channels under `{prefix}`.
pub fn init_bn(params: &mut ParamStore, buffers: &mut ParamStore, prefix: &str, c: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full([1, c, 1, 1], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros([1, c, 1, 1]));
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros([1, c, 1, 1]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::full([1, c, 1, 1], 1.0));
}

// ===== gradient checking =====

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Central-difference check of `analytic` against `f` evaluated around
/// `params`. For each parameter, up to `coords_per_param` distinct random
/// coordinates (all of them for small tensors) are perturbed by `±step`.
/// Relative error uses denominator `max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    mut f: F,
    step: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let mut work = params.clone();
    for (name, theta) in params.iter() {
        let n = theta.numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < coords_per_param {
                seen.insert(rng.gen_range(0..n));
            }
            seen.into_iter().collect()
        };
        let a = analytic.get(name);
        for &i in &coords {
            let orig = theta.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let f_hi = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let f_lo = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            if !f_hi.is_finite() || !f_lo.is_finite() {
                return Err(Error::NonFinite {
                    op: "grad_check",
                    what: format!("loss at {}[{}] perturbed by ±{}", name, i, step),
                });
            }
            let numeric = (f_hi - f_lo) / (2.0 * step);
            let an = a.map_or(0.0, |t| t.data()[i]);
            let rel = (an - numeric).abs() / 1.0_f64.max(an.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Default finite-difference step and acceptance threshold used by the
/// gradient suites.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;
pub const GRAD_CHECK_COORDS: usize = 32;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_loss_grad_is_input() {
        let mut r = rng(1);
        let x = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut r);
        let w = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let wid = g.leaf(w, true);
        let xid = g.constant(x.clone());
        let prod = g.mul(wid, xid).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert!(g.grad(wid).unwrap().bits_eq(&x));
        assert!(g.grad(xid).is_none());
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_relative_eq!(g.grad(x).unwrap().data()[0], 6.0);
        g.backward(loss).unwrap();
        assert_relative_eq!(g.grad(x).unwrap().data()[0], 12.0);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_relative_eq!(g.grad(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn fixed_kernel_gets_no_grad_input_does() {
        let mut r = rng(2);
        let x = Tensor::uniform([1, 1, 4, 4], -1.0, 1.0, &mut r);
        let k = Tensor::from_vec([1, 1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let mut g = Graph::new();
        let xid = g.leaf(x, true);
        let kid = g.constant(k);
        let c = g.conv2d(xid, kid, None, Conv2dSpec::strided(2)).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert!(g.grad(kid).is_none());
        let gx = g.grad(xid).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        let err = g.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn graph_loss_composition_matches_fd() {
        // A miniature net exercising most op kinds at once.
        let mut r = rng(3);
        let mut params = ParamStore::new();
        params.insert("k", Tensor::uniform([2, 1, 3, 3], -0.5, 0.5, &mut r));
        params.insert("gamma", Tensor::uniform([1, 2, 1, 1], 0.8, 1.2, &mut r));
        params.insert("beta", Tensor::uniform([1, 2, 1, 1], -0.1, 0.1, &mut r));
        let x = Tensor::uniform([2, 1, 6, 6], -1.0, 1.0, &mut r);
        let target = Tensor::uniform([2, 1, 6, 6], 0.0, 1.0, &mut r).map(|v| v.round());

        let forward = |p: &ParamStore, want_graph: bool| -> (f64, Option<(Graph, BTreeMap<String, NodeId>)>) {
            let mut g = Graph::new();
            let ids = leaf_params(&mut g, p);
            let xid = g.constant(x.clone());
            let rm = Tensor::zeros([1, 2, 1, 1]);
            let rv = Tensor::full([1, 2, 1, 1], 1.0);
            let c = g.conv2d(xid, ids["k"], None, Conv2dSpec::padded(1)).unwrap();
            let (bnid, _, _) =
                g.batch_norm_train(c, ids["gamma"], ids["beta"], &rm, &rv, 0.1, 1e-5).unwrap();
            let a = g.relu(bnid);
            let up = g.bilinear_upsample(a, 2).unwrap();
            let pool = g.avg_pool2(up).unwrap();
            let cm = g.channel_mean(pool);
            let bce = g.bce_with_logits(cm, &target).unwrap();
            let probs = g.sigmoid(cm);
            let dice = g.soft_dice(probs, &target).unwrap();
            let loss = g.add(bce, dice).unwrap();
            let v = g.value(loss).data()[0];
            if want_graph {
                let mut g = g;
                g.backward(loss).unwrap();
                (v, Some((g, ids)))
            } else {
                (v, None)
            }
        };

        let (_, built) = forward(&params, true);
        let (g, ids) = built.unwrap();
        let analytic = collect_grads(&g, &ids, &params);
        let report = grad_check(
            &params,
            &analytic,
            |p| Ok(forward(p, false).0),
            GRAD_CHECK_STEP,
            GRAD_CHECK_COORDS,
            7,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= GRAD_CHECK_TOL,
            "max rel err {:e} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let mut r = rng(4);
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::uniform([1, 1, 2, 4], -2.0, 2.0, &mut r));
        let analytic: BTreeMap<String, Tensor> =
            [("theta".to_string(), params.get("theta").unwrap().scale(2.0))].into();
        let report = grad_check(
            &params,
            &analytic,
            |p| Ok(p.get("theta").unwrap().energy()),
            GRAD_CHECK_STEP,
            GRAD_CHECK_COORDS,
            5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-9, "rel err {:e}", report.max_rel_err);
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::from_vec([1, 1, 1, 2], vec![1.0, -2.0]).unwrap());
        // Claim dL/dtheta = 3*theta when the truth is 2*theta.
        let analytic: BTreeMap<String, Tensor> =
            [("theta".to_string(), params.get("theta").unwrap().scale(3.0))].into();
        let report = grad_check(
            &params,
            &analytic,
            |p| Ok(p.get("theta").unwrap().energy()),
            GRAD_CHECK_STEP,
            8,
            5,
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-1);
        assert_eq!(report.worst_param, "theta");
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::scalar(0.0));
        let analytic = BTreeMap::new();
        let err = grad_check(
            &params,
            &analytic,
            |p| Ok(p.get("theta").unwrap().data()[0].ln()),
            1e-5,
            4,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn sgd_momentum_two_steps_frozen() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.0));
        let mut vel = ParamStore::new();
        let grads: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::scalar(1.0))].into();
        let cfg = SgdConfig { lr: 1.0, momentum: 0.867472, weight_decay: 0.0 };
        sgd_step(&mut params, &mut vel, &grads, cfg).unwrap();
        assert_relative_eq!(params.get("w").unwrap().data()[0], -1.0);
        sgd_step(&mut params, &mut vel, &grads, cfg).unwrap();
        assert_relative_eq!(params.get("w").unwrap().data()[0], -2.867472, epsilon = 1e-12);
    }

    #[test]
    fn sgd_weight_decay_couples_into_momentum() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut vel = ParamStore::new();
        let grads: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::scalar(0.0))].into();
        sgd_step(
            &mut params,
            &mut vel,
            &grads,
            SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.1 },
        )
        .unwrap();
        assert_relative_eq!(params.get("w").unwrap().data()[0], 0.9, epsilon = 1e-15);
        // The decay term is now in the velocity buffer: with momentum 0.5 and
        // still-zero gradient the next step moves by 0.5*0.1 + 0.09.
        let mut params2 = ParamStore::new();
        params2.insert("w", Tensor::scalar(1.0));
        let mut vel2 = ParamStore::new();
        let cfg = SgdConfig { lr: 1.0, momentum: 0.5, weight_decay: 0.1 };
        sgd_step(&mut params2, &mut vel2, &grads, cfg).unwrap();
        assert_relative_eq!(params2.get("w").unwrap().data()[0], 0.9, epsilon = 1e-15);
        sgd_step(&mut params2, &mut vel2, &grads, cfg).unwrap();
        assert_relative_eq!(params2.get("w").unwrap().data()[0], 0.9 - (0.5 * 0.1 + 0.09), epsilon = 1e-15);
    }

    #[test]
    fn sgd_lr_zero_is_identity() {
        let mut r = rng(6);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::uniform([1, 1, 2, 2], -1.0, 1.0, &mut r));
        let before = params.get("w").unwrap().clone();
        let mut vel = ParamStore::new();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::uniform([1, 1, 2, 2], -1.0, 1.0, &mut r))].into();
        sgd_step(&mut params, &mut vel, &grads, SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 0.1 })
            .unwrap();
        assert!(params.get("w").unwrap().bits_eq(&before));
    }

    #[test]
    fn channel_max_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec([1, 2, 1, 2], vec![3.0, 7.0, 5.0, 1.0]).unwrap(), true);
        let m = g.channel_max(x);
        assert_eq!(g.value(m).data(), &[5.0, 7.0]);
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_backward_splits_by_channel() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let b = g.leaf(Tensor::full([1, 2, 2, 2], 2.0), true);
        let cat = g.concat_channels(&[a, b]).unwrap();
        let w = g.constant(
            Tensor::from_vec(
                [1, 3, 2, 2],
                (0..12).map(|i| i as f64).collect(),
            )
            .unwrap(),
        );
        let prod = g.mul(cat, w).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn bce_and_dice_frozen_values() {
        // Logit 0 against target 0: bce = ln 2, dice on p = 0.5 is
        // 1 - 0/(0.5 + 0 + 1) = 1, total ~ 1.6931.
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(0.0), true);
        let t = Tensor::scalar(0.0);
        let bce = g.bce_with_logits(z, &t).unwrap();
        assert_relative_eq!(g.value(bce).data()[0], std::f64::consts::LN_2, epsilon = 1e-15);
        let p = g.sigmoid(z);
        let dice = g.soft_dice(p, &t).unwrap();
        assert_relative_eq!(g.value(dice).data()[0], 1.0, epsilon = 1e-15);
        let total = g.add(bce, dice).unwrap();
        assert_relative_eq!(g.value(total).data()[0], std::f64::consts::LN_2 + 1.0, epsilon = 1e-15);
        // Perfect prediction on 4 pixels: dice residual is 1 - 8/9.
        let mut g2 = Graph::new();
        let p1 = g2.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let t1 = Tensor::full([1, 1, 2, 2], 1.0);
        let d = g2.soft_dice(p1, &t1).unwrap();
        assert_relative_eq!(g2.value(d).data()[0], 1.0 - 8.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn bce_stable_at_extreme_logits() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![500.0, -500.0]).unwrap(), true);
        let t = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let bce = g.bce_with_logits(z, &t).unwrap();
        let v = g.value(bce).data()[0];
        assert!(v.is_finite() && v >= 0.0 && v < 1e-12);
        g.backward(bce).unwrap();
        assert!(g.grad(z).unwrap().all_finite());
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut r = rng(9);
        let k = kaiming_conv([8, 4, 3, 3], &mut r);
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(k.data().iter().all(|&v| v.abs() <= bound));
        // Not degenerate: spread over at least half the range.
        let max = k.data().iter().cloned().fold(f64::MIN, f64::max);
        let min = k.data().iter().cloned().fold(f64::MAX, f64::min);
        assert!(max > 0.5 * bound && min < -0.5 * bound);
    }
}
