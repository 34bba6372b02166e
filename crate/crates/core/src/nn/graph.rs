//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use super::ops::{self, ConvGeom};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Batch statistics observed by a training-mode normalization node.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub slot: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { slot: usize },
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Param(usize),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Add(NodeId, NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SumSquaredError {
        x: NodeId,
        target: Tensor,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const NORM_EPS: f64 = 1e-5;

/// Piecewise choices of a forward pass, in evaluation order: which rectifier
/// inputs were negative and which element each pooling window selected.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Pattern {
    negative: Vec<Vec<bool>>,
    argmax: Vec<Vec<usize>>,
}

struct Frozen {
    pattern: Pattern,
    next_rect: usize,
    next_pool: usize,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    trainable: &'p [bool],
    nodes: Vec<Node>,
    norm_stats: Vec<NormStats>,
    frozen: Option<Frozen>,
}

impl<'p> Graph<'p> {
    /// `trainable[i]` selects which parameters receive gradients.
    pub fn new(params: &'p [Tensor], trainable: &'p [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Self {
            params,
            trainable,
            nodes: Vec::new(),
            norm_stats: Vec::new(),
            frozen: None,
        }
    }

    /// A forward-only graph whose rectifiers and pools replay `pattern`
    /// instead of deciding from their inputs. The result is the smooth piece
    /// of the function that contains the point `pattern` was recorded at.
    pub fn with_pattern(params: &'p [Tensor], trainable: &'p [bool], pattern: Pattern) -> Self {
        let mut g = Self::new(params, trainable);
        g.frozen = Some(Frozen {
            pattern,
            next_rect: 0,
            next_pool: 0,
        });
        g
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn take_norm_stats(&mut self) -> Vec<NormStats> {
        std::mem::take(&mut self.norm_stats)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        let value = self.params[index].clone();
        let rg = self.trainable[index];
        self.push(value, Op::Param(index), rg)
    }

    /// Convolution over `(N, C, H, W)` with a `(O, C, kh, kw)` kernel, or over
    /// `(N, C, D, H, W)` with a `(O, C, kd, kh, kw)` kernel.
    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let geom = ConvGeom::new(&xs, &ws, stride, pad);
        let out = ops::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv { x, w, b, geom }, rg)
    }

    /// Per-channel normalization over the batch and spatial axes.
    pub fn norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: NormMode<'_>) -> NodeId {
        let input = self.value(x);
        let (n, c, s) = ops::channel_layout(input.shape());
        let (mean, var, batch) = match mode {
            NormMode::Batch { slot } => {
                let (mean, var) = ops::channel_moments(input.data(), n, c, s);
                self.norm_stats.push(NormStats {
                    slot,
                    mean: mean.clone(),
                    var: var.clone(),
                });
                (mean, var, true)
            }
            NormMode::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let input = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; input.len()];
        let mut out = Tensor::zeros(input.shape());
        {
            let src = input.data();
            let dst = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    for k in base..base + s {
                        let h = (src[k] - mean[ci]) * inv_std[ci];
                        xhat[k] = h;
                        dst[k] = g[ci] * h + bt[ci];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut out = self.value(x).clone();
        if let Some(f) = self.frozen.as_mut() {
            let mask = &f.pattern.negative[f.next_rect];
            f.next_rect += 1;
            assert_eq!(mask.len(), out.len(), "frozen pattern does not match the graph");
            for (v, &neg) in out.data_mut().iter_mut().zip(mask) {
                if neg {
                    *v *= slope;
                }
            }
        } else {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v *= slope;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// 2x2 max pooling with stride 2 over the last two axes of `(N, C, H, W)`.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (mut out, mut argmax) = ops::max_pool2_forward(self.value(x));
        if let Some(f) = self.frozen.as_mut() {
            let fixed = f.pattern.argmax[f.next_pool].clone();
            f.next_pool += 1;
            assert_eq!(fixed.len(), argmax.len(), "frozen pattern does not match the graph");
            let src = self.nodes[x.0].value.data();
            for (o, &a) in out.data_mut().iter_mut().zip(&fixed) {
                *o = src[a];
            }
            argmax = fixed;
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `(N, C, H, W)`.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let out = ops::upsample2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// Mean over all spatial axes, producing `(N, C)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let input = self.value(x);
        let (n, c, s) = ops::channel_layout(input.shape());
        let mut out = Tensor::zeros(&[n, c]);
        for (o, chunk) in out.data_mut().iter_mut().zip(input.data().chunks(s)) {
            *o = chunk.iter().sum::<f64>() / s as f64;
        }
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    /// `x (N, F) -> x W^T + b` with `W (O, F)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Sum of squared differences against a constant target; scalar output.
    pub fn sum_squared_error(&mut self, x: NodeId, target: Tensor) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.shape(), target.shape(), "loss target shape");
        let sse = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(sse), Op::SumSquaredError { x, target }, rg)
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut total = 0.0;
        for &(id, w) in terms {
            total += w * self.value(id).item();
        }
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    /// Backpropagates from a scalar node and returns one gradient slot per
    /// parameter (`None` for frozen or unused parameters).
    pub fn pattern(&self) -> Pattern {
        let mut p = Pattern::default();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => p.negative.push(self.value(*x).data().iter().map(|v| *v < 0.0).collect()),
                Op::MaxPool2 { argmax, .. } => p.argmax.push(argmax.clone()),
                _ => {}
            }
        }
        p
    }

    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        assert!(self.frozen.is_none(), "frozen graphs are forward-only");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => accumulate(&mut param_grads[*p], gout),
                Op::Conv { x, w, b, geom } => {
                    let want_x = self.rg(*x);
                    let (dx, dw, db) = ops::conv_backward(
                        self.value(*x),
                        self.value(*w),
                        &gout,
                        geom,
                        want_x,
                        self.rg(*w),
                        b.is_some_and(|b| self.rg(b)),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let shape = self.value(*x).shape();
                    let (n, c, s) = ops::channel_layout(shape);
                    let g = self.value(*gamma).data();
                    let dy = gout.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * s;
                            for k in base..base + s {
                                dgamma[ci] += dy[k] * xhat[k];
                                dbeta[ci] += dy[k];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(shape);
                        let dxd = dx.data_mut();
                        let m = (n * s) as f64;
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * s;
                                let scale = g[ci] * inv_std[ci];
                                if *batch {
                                    let mean_dy = dbeta[ci] / m;
                                    let mean_dyx = dgamma[ci] / m;
                                    for k in base..base + s {
                                        dxd[k] = scale * (dy[k] - mean_dy - xhat[k] * mean_dyx);
                                    }
                                } else {
                                    for k in base..base + s {
                                        dxd[k] = scale * dy[k];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads[gamma.0], Tensor::from_vec(&[c], dgamma));
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads[beta.0], Tensor::from_vec(&[c], dbeta));
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let mut dx = gout;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                        if v < 0.0 {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) && self.rg(*b) {
                        accumulate(&mut grads[a.0], gout.clone());
                        accumulate(&mut grads[b.0], gout);
                    } else if self.rg(*a) {
                        accumulate(&mut grads[a.0], gout);
                    } else {
                        accumulate(&mut grads[b.0], gout);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let dxd = dx.data_mut();
                    for (&src, &g) in argmax.iter().zip(gout.data()) {
                        dxd[src] += g;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Upsample2 { x } => {
                    let dx = ops::upsample2_backward(&gout, self.value(*x).shape());
                    accumulate(&mut grads[x.0], dx);
                }
                Op::GlobalAvgPool { x } => {
                    let shape = self.value(*x).shape();
                    let (_, _, s) = ops::channel_layout(shape);
                    let mut dx = Tensor::zeros(shape);
                    for (chunk, &g) in dx.data_mut().chunks_mut(s).zip(gout.data()) {
                        chunk.fill(g / s as f64);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(self.value(*x), self.value(*w), &gout, self.rg(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Reshape { x } => {
                    let dx = gout.reshaped(self.value(*x).shape());
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SumSquaredError { x, target } => {
                    let g = gout.item();
                    let v = self.value(*x);
                    let dx: Vec<f64> = v
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| 2.0 * g * (a - b))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(v.shape(), dx));
                }
                Op::WeightedSum { terms } => {
                    let g = gout.item();
                    for &(id, w) in terms {
                        if self.rg(id) {
                            accumulate(&mut grads[id.0], Tensor::scalar(g * w));
                        }
                    }
                }
            }
        }
        param_grads
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_pattern_replays_rectifier_and_pool_choices() {
        let params: Vec<Tensor> = Vec::new();
        let mask: Vec<bool> = Vec::new();
        let x0 = Tensor::from_vec(&[1, 1, 2, 2], vec![-1.0, 2.0, 0.5, -3.0]);
        let mut g = Graph::new(&params, &mask);
        let x = g.input(x0);
        let r = g.relu(x);
        g.max_pool2(r);
        let pattern = g.pattern();

        let x1 = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let mut free = Graph::new(&params, &mask);
        let x = free.input(x1.clone());
        let r = free.relu(x);
        let p = free.max_pool2(r);
        assert_eq!(free.value(p).data(), &[3.0]);
        assert_ne!(free.pattern(), pattern);

        let mut frozen = Graph::with_pattern(&params, &mask, pattern.clone());
        let x = frozen.input(x1);
        let r = frozen.relu(x);
        let p = frozen.max_pool2(r);
        // Rectifier keeps the old signs (index 0 and 3 zeroed) and the pool
        // keeps reading index 1.
        assert_eq!(frozen.value(r).data(), &[0.0, -2.0, 0.5, 0.0]);
        assert_eq!(frozen.value(p).data(), &[-2.0]);
    }
}
