use super::conv::{self, ConvGeom};
use super::kernels::{self, PoolGeom};
use super::{Conv2dSpec, PoolKind, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Pool { x: Var, kind: PoolKind, geom: PoolGeom, argmax: Vec<u32> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bilinear { x: Var, planes: usize, h: usize, w: usize },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    AddN(Vec<Var>),
    Scale { x: Var, c: T },
    WeightedSum { terms: Vec<(Var, usize)>, weights: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<(Var, usize)>),
    GlobalAvgPool(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

/// A recorded computation. Nodes are appended in topological order.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_channel_broadcast(a: &[usize], b: &[usize]) -> Option<bool> {
    if a == b {
        return Some(false);
    }
    let ok = a.len() >= 2
        && a.len() == b.len()
        && b[1] == 1
        && a[0] == b[0]
        && a[2..] == b[2..];
    ok.then_some(true)
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], what: &'static str) -> Result<Var> {
        if !kernels::all_finite(value.data()) {
            return Err(Error::NonFinite {
                context: format!("{what} output (node {})", self.nodes.len()),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        let value = Tensor {
            grad: None,
            ..tensor
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        let out = conv::forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push(value, Op::Conv2d { x, w, geom }, &[x, w], "conv2d")
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), k, stride, padding)?;
        let (out, argmax) = kernels::pool_forward(self.value(x).data(), &geom, kind);
        let s = self.shape(x);
        let value = Tensor::new(&[s[0], s[1], geom.ho, geom.wo], out)?;
        self.push(value, Op::Pool { x, kind, geom, argmax }, &[x], "pool2d")
    }

    /// `x[N,D] · w[D,K] + b[K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return dim_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return dim_err(format!("linear: bias {:?} should be [{k}]", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * k];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_mut(k).for_each(|row| row.copy_from_slice(bias));
        }
        // SAFETY: x is n×d, w is d×k, out is n×k, all contiguous row-major.
        unsafe {
            T::gemm(
                n,
                d,
                k,
                T::one(),
                self.value(x).data().as_ptr(),
                d as isize,
                1,
                self.value(w).data().as_ptr(),
                k as isize,
                1,
                T::one(),
                out.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(&[n, k], out)?, Op::Linear { x, w, b }, &inputs, "linear")
    }

    /// Align-corners bilinear resampling of a rank-4 tensor to `out_h × out_w`.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return dim_err("bilinear_upsample: target size must be positive");
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err(format!("bilinear_upsample expects rank 4, got {s:?}"));
        }
        let planes = s[0] * s[1];
        let out = kernels::bilinear_resize(self.value(x).data(), planes, s[2], s[3], out_h, out_w);
        let value = Tensor::new(&[s[0], s[1], out_h, out_w], out)?;
        self.push(value, Op::Bilinear { x, planes, h: s[2], w: s[3] }, &[x], "bilinear")
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some(broadcast) = same_or_channel_broadcast(&sa, &sb) else {
            return dim_err(format!("elementwise: incompatible shapes {sa:?} and {sb:?}"));
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = if broadcast {
            let (c, plane) = (sa[1], sa[2..].iter().product::<usize>());
            va.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let j = (i / (c * plane)) * plane + i % plane;
                    if mul {
                        x * vb[j]
                    } else {
                        x + vb[j]
                    }
                })
                .collect()
        } else if mul {
            va.iter().zip(vb).map(|(&x, &y)| x * y).collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| x + y).collect()
        };
        let value = Tensor::new(&sa, out)?;
        let op = if mul { Op::Mul { a, b, broadcast } } else { Op::Add { a, b, broadcast } };
        self.push(value, op, &[a, b], if mul { "mul" } else { "add" })
    }

    /// `a + b`; `b` may have a channel dimension of 1 and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// `a ⊙ b`; `b` may have a channel dimension of 1 and is then broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("add_n of zero tensors");
        };
        let shape = self.shape(first).to_vec();
        let mut out = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            if self.shape(x) != shape.as_slice() {
                return dim_err(format!("add_n: {:?} vs {shape:?}", self.shape(x)));
            }
            out.iter_mut().zip(self.value(x).data()).for_each(|(a, &b)| *a += b);
        }
        self.push(Tensor::new(&shape, out)?, Op::AddN(xs.to_vec()), xs, "add_n")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a * c).collect();
        let value = Tensor::new(v.shape(), out)?;
        self.push(value, Op::Scale { x, c }, &[x], "scale")
    }

    /// `Σ_t weights.flat[i_t] · x_t` over equally shaped terms `(x_t, i_t)`.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize)], weights: Var) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return dim_err("weighted_sum of zero terms");
        };
        let shape = self.shape(first).to_vec();
        let wv = self.value(weights).data();
        let mut out = vec![T::zero(); self.value(first).numel()];
        for &(x, i) in terms {
            if self.shape(x) != shape.as_slice() {
                return dim_err(format!("weighted_sum: {:?} vs {shape:?}", self.shape(x)));
            }
            let Some(&w) = wv.get(i) else {
                return dim_err(format!("weighted_sum: weight index {i} out of range"));
            };
            out.iter_mut().zip(self.value(x).data()).for_each(|(a, &b)| *a += w * b);
        }
        let mut inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        inputs.push(weights);
        let op = Op::WeightedSum {
            terms: terms.to_vec(),
            weights,
        };
        self.push(Tensor::new(&shape, out)?, op, &inputs, "weighted_sum")
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return dim_err(format!("batch_norm expects rank 4, got {s:?}"));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(format!("batch_norm affine terms must be [{c}]"));
        }
        Ok((s[0], c, s[2] * s[3]))
    }

    /// Batch norm with batch statistics; returns the statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let m = n * plane;
        if m < 2 {
            return Err(Error::Usage(format!(
                "batch_norm in train mode needs N*H*W >= 2, got {m}"
            )));
        }
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let planes = (0..n).map(|i| &xv[(i * c + ch) * plane..][..plane]);
            let total: f64 = planes.clone().map(|p| kernels::lane_sum(p).as_f64()).sum();
            let mu = T::from_f64(total / m as f64);
            let sq: f64 = planes.map(|p| kernels::lane_sq_dev(p, mu).as_f64()).sum();
            mean[ch] = mu;
            var[ch] = T::from_f64(sq / m as f64);
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|&v| v * T::from_usize(m) / T::from_usize(m - 1))
                .collect(),
        };
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return dim_err(format!("batch_norm running stats must have {c} channels"));
        }
        self.bn_apply(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (xh, o)) in xhat.chunks_mut(plane).zip(out.chunks_mut(plane)).enumerate() {
            let ch = i % c;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            let src = &xv[i * plane..(i + 1) * plane];
            for ((xh, o), &v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                *xh = (v - mu) * is;
                *o = g * *xh + b;
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        self.push(Tensor::new(&s, out)?, op, &[x, gamma, beta], "batch_norm")
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return dim_err(format!("softmax axis {axis} out of range for {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xv[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (xv[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let op = Op::Softmax { x, outer, len, inner };
        self.push(Tensor::new(&s, out)?, op, &[x], "softmax")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape(), out)?;
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .map(|&a| {
                if a >= T::zero() {
                    T::one() / (T::one() + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let value = Tensor::new(v.shape(), out)?;
        self.push(value, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat of zero tensors");
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() != 4 {
            return dim_err(format!("concat expects rank 4, got {s0:?}"));
        }
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != s0[0] || s[2..] != s0[2..] {
                return dim_err(format!("concat: {s:?} incompatible with {s0:?}"));
            }
            parts.push((x, s[1]));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let plane = s0[2] * s0[3];
        let mut out = Vec::with_capacity(s0[0] * total * plane);
        for n in 0..s0[0] {
            for &(x, c) in &parts {
                out.extend_from_slice(&self.value(x).data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[s0[0], total, s0[2], s0[3]], out)?;
        self.push(value, Op::Concat(parts), xs, "concat")
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err(format!("global_avg_pool expects rank 4, got {s:?}"));
        }
        let plane = s[2] * s[3];
        let scale = T::one() / T::from_usize(plane);
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        self.push(value, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!("cross_entropy: logits {s:?} vs {} labels", labels.len()));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += (lse - row[y]).as_f64();
        }
        let value = Tensor::scalar(T::from_f64(loss / n as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(value, op, &[logits], "cross_entropy")
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("mse: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let total: f64 = va.iter().zip(vb).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum();
        let value = Tensor::scalar(T::from_f64(total / va.len() as f64));
        self.push(value, Op::Mse { a, b }, &[a, b], "mse")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel());
        self.push(Tensor::scalar(total), Op::Mean(x), &[x], "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
    /// intermediate gradients are released as soon as they are propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of leaf {i}"),
                    });
                }
                add_into(&mut self.grads[i], g);
                continue;
            }
            self.propagate(i, &g, &mut pending)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, delta: Vec<T>| {
            if need(v) {
                add_into(&mut pending[v.0], delta)
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                if need(*w) {
                    send(*w, conv::backward_weight(g, val(*x), geom));
                }
                if need(*x) {
                    send(*x, conv::backward_input(g, val(*w), geom));
                }
            }
            Op::Pool { x, kind, geom, argmax } => {
                send(*x, kernels::pool_backward(g, geom, *kind, argmax));
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                if need(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    // SAFETY: g is n×k, w is d×k (read transposed), dx is n×d.
                    unsafe {
                        T::gemm(
                            n,
                            k,
                            d,
                            T::one(),
                            g.as_ptr(),
                            k as isize,
                            1,
                            val(*w).as_ptr(),
                            1,
                            k as isize,
                            T::zero(),
                            dx.as_mut_ptr(),
                            d as isize,
                            1,
                        );
                    }
                    send(*x, dx);
                }
                if need(*w) {
                    let mut dw = vec![T::zero(); d * k];
                    // SAFETY: x read transposed (d×n), g is n×k, dw is d×k.
                    unsafe {
                        T::gemm(
                            d,
                            n,
                            k,
                            T::one(),
                            val(*x).as_ptr(),
                            1,
                            d as isize,
                            g.as_ptr(),
                            k as isize,
                            1,
                            T::zero(),
                            dw.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    send(*w, dw);
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    let mut db = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    send(b, db);
                }
            }
            Op::Bilinear { x, planes, h, w } => {
                let s = node.value.shape();
                send(*x, kernels::bilinear_backward(g, *planes, *h, *w, s[2], s[3]));
            }
            Op::Add { a, b, broadcast } => {
                if need(*a) {
                    send(*a, g.to_vec());
                }
                if need(*b) {
                    let db = if *broadcast { self.channel_sum(*a, g, None) } else { g.to_vec() };
                    send(*b, db);
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (va, vb) = (val(*a), val(*b));
                if need(*a) {
                    let da = if *broadcast {
                        let s = self.shape(*a);
                        let (c, plane) = (s[1], s[2..].iter().product::<usize>());
                        g.iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * vb[(i / (c * plane)) * plane + i % plane])
                            .collect()
                    } else {
                        g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect()
                    };
                    send(*a, da);
                }
                if need(*b) {
                    let db = if *broadcast {
                        self.channel_sum(*a, g, Some(va))
                    } else {
                        g.iter().zip(va).map(|(&gv, &x)| gv * x).collect()
                    };
                    send(*b, db);
                }
            }
            Op::AddN(xs) => {
                for &x in xs.iter().filter(|&&x| need(x)) {
                    send(x, g.to_vec());
                }
            }
            Op::Scale { x, c } => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::WeightedSum { terms, weights } => {
                let wv = val(*weights);
                if need(*weights) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for &(x, idx) in terms {
                        dw[idx] += kernels::lane_dot(g, val(x));
                    }
                    send(*weights, dw);
                }
                for &(x, idx) in terms.iter().filter(|t| need(t.0)) {
                    send(x, g.iter().map(|&v| v * wv[idx]).collect());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = T::from_usize(n * plane);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (gp, xp)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    dgamma[i % c] += kernels::lane_dot(gp, xp);
                    dbeta[i % c] += kernels::lane_sum(gp);
                }
                if need(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (i, ((d, gp), xp)) in dx.chunks_mut(plane).zip(g.chunks(plane)).zip(xhat.chunks(plane)).enumerate() {
                        let ch = i % c;
                        if *train {
                            let k = gv[ch] * inv_std[ch] / m;
                            let (db, dg) = (dbeta[ch], dgamma[ch]);
                            for ((d, &gi), &xh) in d.iter_mut().zip(gp).zip(xp) {
                                *d = k * (m * gi - db - xh * dg);
                            }
                        } else {
                            let k = gv[ch] * inv_std[ch];
                            for (d, &gi) in d.iter_mut().zip(gp) {
                                *d = k * gi;
                            }
                        }
                    }
                    send(*x, dx);
                }
                if need(*gamma) {
                    send(*gamma, dgamma);
                }
                if need(*beta) {
                    send(*beta, dbeta);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..*len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..*len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Relu(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() }).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect());
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (n, total, plane) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &(x, c) in parts {
                    if need(x) {
                        let mut dx = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            dx.extend_from_slice(&g[(b * total + offset) * plane..(b * total + offset + c) * plane]);
                        }
                        send(x, dx);
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let scale = T::one() / T::from_usize(plane);
                let mut dx = Vec::with_capacity(g.len() * plane);
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * scale, plane));
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_usize(n);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * k + y] -= scale;
                }
                send(*logits, dx);
            }
            Op::Mse { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let scale = g[0] * T::from_f64(2.0) / T::from_usize(va.len());
                let diff: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * scale).collect();
                if need(*b) {
                    send(*b, diff.iter().map(|&d| -d).collect());
                }
                if need(*a) {
                    send(*a, diff);
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / T::from_usize(n); n]);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
        }
        Ok(())
    }

    /// Sums `g` (optionally weighted by `w`) over the channel axis of `like`'s shape.
    fn channel_sum(&self, like: Var, g: &[T], w: Option<&[T]>) -> Vec<T> {
        let s = self.shape(like);
        let (n, c, plane) = (s[0], s[1], s[2..].iter().product::<usize>());
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let dst = &mut out[b * plane..(b + 1) * plane];
                match w {
                    Some(w) => {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d += g[base + j] * w[base + j];
                        }
                    }
                    None => {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d += g[base + j];
                        }
                    }
                }
            }
        }
        out
    }
}
