use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::roi;
use super::{shape_err, Conv2dSpec, Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: R },
    Relu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize, n: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    Dropout { x: usize, mask: Vec<R> },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape { x: usize },
    Transpose { x: usize, m: usize, n: usize },
    Sum { x: usize },
    Mean { x: usize },
    L1 { pred: usize, target: usize },
    Mse { pred: usize, target: usize },
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<R>, k: usize },
    RoiAlign { feature: usize, boxes: Vec<[f64; 4]>, scale: f64 },
    Gather { x: usize, src: Vec<Option<usize>> },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L1 { .. } => "l1_loss",
            Op::Mse { .. } => "mse_loss",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::RoiAlign { .. } => "roi_align",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    grad: Option<Tensor<R>>,
    needs_grad: bool,
    op: Op<R>,
}

/// Records operations in creation order (which is a topological order) and
/// replays them in reverse to accumulate gradients.
///
/// A graph is single-use for gradients: a second [`Graph::backward`]
/// without [`Graph::reset_grads`] is an error.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    backpropagated: bool,
    visited: usize,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backpropagated: false,
            visited: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Nodes processed by the last backward pass.
    pub fn backward_visits(&self) -> usize {
        self.visited
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backpropagated = false;
        self.visited = 0;
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[usize]) -> Result<Var> {
        let value = value.check_finite(op.name())?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x), self.value(w), self.value(b), spec)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        )?;
        self.push(out, Op::Conv2d { x: x.0, w: w.0, b: b.0, geom }, &[x.0, w.0, b.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let (m, k) = kernels::dims2(self.value(a), "matmul")?;
        let n = out.shape()[1];
        self.push(out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// Adds `b[M]` to every length-`M` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let m = self.value(b).numel();
        let xs = self.value(x);
        if self.value(b).ndim() != 1 || xs.shape().last() != Some(&m) {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", xs.shape(), self.shape(b)),
            ));
        }
        let bd = self.value(b).data();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(m) {
            for (v, bb) in row.iter_mut().zip(bd) {
                *v += *bb;
            }
        }
        let out = Tensor::new(xs.shape().to_vec(), out)?;
        self.push(out, Op::AddBias { x: x.0, b: b.0 }, &[x.0, b.0])
    }

    /// `x · w + b` for `x[N,in]`, `w[in,out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<R>, f: impl Fn(R, R) -> R) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add { a: a.0, b: b.0 }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub { a: a.0, b: b.0 }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul { a: a.0, b: b.0 }, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = R::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x: x.0, s }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(R::zero()));
        self.push(out, Op::Relu { x: x.0 }, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| R::one() / (R::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_last(self.value(x))?;
        let n = *out.shape().last().expect("rank >= 1");
        self.push(out, Op::Softmax { x: x.0, n }, &[x.0])
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(x), k)?;
        self.push(out, Op::MaxPool { x: x.0, argmax }, &[x.0])
    }

    /// Inverted dropout with drop probability `p`; the mask is drawn from
    /// the caller's RNG so runs are reproducible.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = R::of(1.0 / (1.0 - p));
        let mask: Vec<R> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { R::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit, already scaled mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<R>) -> Result<Var> {
        let xs = self.value(x);
        if mask.len() != xs.numel() {
            return Err(shape_err(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), xs.shape()),
            ));
        }
        let data = xs.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let out = Tensor::new(xs.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<R>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = kernels::concat(&tensors, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = kernels::dims2(self.value(x), "transpose")?;
        let out = kernels::transpose2(self.value(x))?;
        self.push(out, Op::Transpose { x: x.0, m, n }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean { x: x.0 }, &[x.0])
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = R::of(p.numel().max(1) as f64);
        let s: R = p.data().iter().zip(t.data()).map(|(a, b)| (*a - *b).abs()).sum();
        self.push(
            Tensor::scalar(s / n),
            Op::L1 { pred: pred.0, target: target.0 },
            &[pred.0, target.0],
        )
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = R::of(p.numel().max(1) as f64);
        let s: R = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        self.push(
            Tensor::scalar(s / n),
            Op::Mse { pred: pred.0, target: target.0 },
            &[pred.0, target.0],
        )
    }

    /// Mean cross-entropy of `logits[N,K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = kernels::dims2(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {n}x{k} logits", labels.len()),
            ));
        }
        let probs = kernels::softmax_last(self.value(logits))?.into_data();
        let mut loss = R::zero();
        for (i, &l) in labels.iter().enumerate() {
            let lg = self.value(logits).data();
            let row = &lg[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<R>().ln() + max;
            loss += lse - row[l];
        }
        let loss = loss / R::of(n.max(1) as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                k,
            },
            &[logits.0],
        )
    }

    /// RoIAlign of `feature[C,H,W]` to `[N,C,3,3]`.
    pub fn roi_align(&mut self, feature: Var, boxes: &[[f64; 4]], scale: f64) -> Result<Var> {
        let out = roi::roi_align(self.value(feature), boxes, scale)?;
        self.push(
            out,
            Op::RoiAlign {
                feature: feature.0,
                boxes: boxes.to_vec(),
                scale,
            },
            &[feature.0],
        )
    }

    /// `out[i] = x[src[i]]`, or zero where `src[i]` is `None`.
    pub fn gather(&mut self, x: Var, src: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let n: usize = shape.iter().product();
        if src.len() != n || src.iter().flatten().any(|&i| i >= xs.numel()) {
            return Err(shape_err("gather", "index map does not fit"));
        }
        let xd = xs.data();
        let data = src.iter().map(|s| s.map_or(R::zero(), |i| xd[i])).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::Gather { x: x.0, src }, &[x.0])
    }

    /// Reverse pass from a scalar `loss`. Every tracked leaf reachable from
    /// `loss` ends up with a gradient; unreachable tracked leaves get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        self.visited = 0;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.visited += 1;
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.needs_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let data = g.unwrap_or_else(|| vec![R::zero(); node.value.numel()]);
            node.grad = Some(Tensor::new(shape, data)?);
        }
        self.backpropagated = true;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.data();
        let want = |i: usize| self.nodes[i].needs_grad;
        let mut acc = |i: usize, contrib: Vec<R>| {
            if !self.nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, geom);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::MatMul { a, b, m, k, n } => {
                if want(*a) {
                    let mut da = vec![R::zero(); m * k];
                    kernels::gemm(false, true, *m, *k, *n, g, val(*b), &mut da, false);
                    acc(*a, da);
                }
                if want(*b) {
                    let mut db = vec![R::zero(); k * n];
                    kernels::gemm(true, false, *k, *n, *m, val(*a), g, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::AddBias { x, b } => {
                let m = self.nodes[*b].value.numel();
                let mut db = vec![R::zero(); m];
                for row in g.chunks(m) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                acc(*x, g.to_vec());
                acc(*b, db);
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(d, y)| *d * *y).collect());
                acc(*b, g.iter().zip(av).map(|(d, x)| *d * *x).collect());
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|v| *v * *s).collect()),
            Op::Relu { x } => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(d, v)| if *v > R::zero() { *d } else { R::zero() })
                    .collect(),
            ),
            Op::Sigmoid { x } => acc(
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(d, y)| *d * *y * (R::one() - *y))
                    .collect(),
            ),
            Op::Softmax { x, n } => {
                let y = node.value.data();
                let mut dx = vec![R::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(*n).zip(y.chunks(*n)).zip(g.chunks(*n)) {
                    let dot: R = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for ((d, yy), gg) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = *yy * (*gg - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![R::zero(); self.nodes[*x].value.numel()];
                for (d, &i) in g.iter().zip(argmax) {
                    dx[i] += *d;
                }
                acc(*x, dx);
            }
            Op::Dropout { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(d, m)| *d * *m).collect())
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis] * inner;
                    if want(p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        acc(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Transpose { x, m, n } => {
                let mut dx = vec![R::zero(); m * n];
                for i in 0..*m {
                    for j in 0..*n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                acc(*x, dx);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.nodes[*x].value.numel()]),
            Op::Mean { x } => {
                let n = self.nodes[*x].value.numel();
                acc(*x, vec![g[0] / R::of(n.max(1) as f64); n]);
            }
            Op::L1 { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let s = g[0] / R::of(p.len().max(1) as f64);
                let dp: Vec<R> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| {
                        let d = *a - *b;
                        if d > R::zero() {
                            s
                        } else if d < R::zero() {
                            -s
                        } else {
                            R::zero()
                        }
                    })
                    .collect();
                if want(*target) {
                    acc(*target, dp.iter().map(|v| -*v).collect());
                }
                acc(*pred, dp);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let s = R::of(2.0) * g[0] / R::of(p.len().max(1) as f64);
                let dp: Vec<R> = p.iter().zip(t).map(|(a, b)| (*a - *b) * s).collect();
                if want(*target) {
                    acc(*target, dp.iter().map(|v| -*v).collect());
                }
                acc(*pred, dp);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
                k,
            } => {
                let s = g[0] / R::of(labels.len().max(1) as f64);
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= R::one();
                }
                dl.iter_mut().for_each(|v| *v *= s);
                acc(*logits, dl);
            }
            Op::RoiAlign {
                feature,
                boxes,
                scale,
            } => {
                let shape = self.nodes[*feature].value.shape();
                acc(*feature, roi::roi_align_backward(shape, boxes, *scale, g));
            }
            Op::Gather { x, src } => {
                let mut dx = vec![R::zero(); self.nodes[*x].value.numel()];
                for (d, s) in g.iter().zip(src) {
                    if let Some(i) = s {
                        dx[*i] += *d;
                    }
                }
                acc(*x, dx);
            }
        }
    }
}
