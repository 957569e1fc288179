//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] for one forward pass. Every operation
//! appends a node holding its output value and whatever it needs for the
//! backward sweep. [`Graph::backward`] returns gradients for every parameter
//! and gradient-tracking input reached from the loss.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::im2col::{batch_to_channel_major, channel_major_to_batch, col2im, im2col, ConvGeom, Plane};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Statistics grouping for [`Graph::normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel, across batch and space.
    Batch,
    /// Per sample and channel, across space.
    Instance,
}

/// Running statistics attached to a batch-normalisation call.
#[derive(Clone, Copy, Debug)]
pub struct RunningStats {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ReflectPad { x: Var, pad: usize },
    Normalize { x: Var, kind: NormKind, inv_std: Vec<T>, batch_stats: bool },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Abs { x: Var },
    Square { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<usize>, weights: Vec<T>, denom: T },
    BceWithLogits { x: Var, target: T },
    Reshape { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    frozen: Vec<bool>,
    train: bool,
    buffer_updates: Vec<(BufferId, Tensor<T>)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    vars: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params.values().flat_map(|t| t.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::Shape(msg.into()))
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph in training mode (batch statistics, gradients tracked).
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: vec![false; store.num_params()],
            train: true,
            buffer_updates: Vec::new(),
        }
    }

    /// A graph in evaluation mode (running statistics).
    pub fn eval(store: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(store);
        g.train = false;
        g
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Treats the given parameters as constants for this pass.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.frozen[id.0] = true;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Pending running-statistic updates collected during the pass.
    pub fn take_buffer_updates(&mut self) -> Vec<(BufferId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.param(id).clone();
        let requires_grad = !self.frozen[id.0];
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != geom.kh || kw != geom.kw {
            return shape_err(format!("conv2d weight {:?} vs input channels {c}", self.shape(w)));
        }
        let (oh, ow) = match (geom.out_dim(h, kh), geom.out_dim(wd, kw)) {
            (Some(a), Some(b)) => (a, b),
            _ => return shape_err(format!("kernel {kh}x{kw} does not fit {h}x{wd}")),
        };
        let l = oh * ow;
        let cols = im2col(self.value(x).data(), Plane { n, c, h, w: wd }, geom, oh, ow);
        let k = c * kh * kw;
        let mut out_cm = vec![T::zero(); o * n * l];
        gemm(self.value(w).data(), MatLayout::plain(o, k), &cols, MatLayout::plain(k, n * l), T::zero(), &mut out_cm);
        let mut out = channel_major_to_batch(&out_cm, n, o, l);
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != o {
                return shape_err("conv2d bias length");
            }
            for (idx, v) in out.iter_mut().enumerate() {
                *v = *v + bias[(idx / l) % o];
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Transposed convolution; weight layout `[C_in, C_out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        output_padding: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (wi, co, kh, kw) = self.value(w).dims4()?;
        if wi != ci || kh != geom.kh || kw != geom.kw {
            return shape_err(format!("conv_transpose2d weight {:?} vs input {ci}", self.shape(w)));
        }
        if output_padding >= geom.stride.max(1) {
            return shape_err("output padding must be smaller than stride");
        }
        let grow = |d: usize, k: usize| -> Option<usize> {
            ((d - 1) * geom.stride + k + output_padding).checked_sub(2 * geom.pad)
        };
        let (oh, ow) = match (grow(h, kh), grow(wd, kw)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return shape_err("transposed convolution output would be empty"),
        };
        let l = h * wd;
        let x_cm = batch_to_channel_major(self.value(x).data(), n, ci, l);
        let k = co * kh * kw;
        let mut cols = vec![T::zero(); k * n * l];
        gemm(self.value(w).data(), MatLayout::t(ci, k), &x_cm, MatLayout::plain(ci, n * l), T::zero(), &mut cols);
        let mut out = col2im(&cols, Plane { n, c: co, h: oh, w: ow }, geom, h, wd);
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != co {
                return shape_err("conv_transpose2d bias length");
            }
            let plane = oh * ow;
            for (idx, v) in out.iter_mut().enumerate() {
                *v = *v + bias[(idx / plane) % co];
            }
        }
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &parents))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad >= h || pad >= w {
            return shape_err(format!("reflection pad {pad} too large for {h}x{w}"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ph * pw];
        for plane in 0..n * c {
            for y in 0..ph {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..pw {
                    let sx = reflect(xx as isize - pad as isize, w);
                    out[plane * ph * pw + y * pw + xx] = src[plane * h * w + sy * w + sx];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ph, pw], out)?;
        Ok(self.push(value, Op::ReflectPad { x, pad }, &[x]))
    }

    /// Standardises `x` per group. In training mode (or for instance
    /// normalisation) batch statistics are used and, when `running` is given,
    /// running-statistic updates are queued; in evaluation mode the running
    /// statistics are used.
    pub fn normalize(&mut self, x: Var, kind: NormKind, eps: f64, running: Option<RunningStats>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let eps_t = T::from_f64_lossy(eps);
        let groups = match kind {
            NormKind::Batch => c,
            NormKind::Instance => n * c,
        };
        let use_batch = self.train || kind == NormKind::Instance || running.is_none();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); groups];
        let mut means = vec![T::zero(); groups];
        let mut vars = vec![T::zero(); groups];
        let count = match kind {
            NormKind::Batch => n * hw,
            NormKind::Instance => hw,
        };
        if use_batch && count < 2 && kind == NormKind::Batch {
            return shape_err("batch normalisation needs more than one value per channel");
        }
        for gi in 0..groups {
            let (mean, var) = if use_batch {
                let mut s = 0.0f64;
                for_group(kind, gi, n, c, hw, |i| s += src[i].as_f64());
                let mean = s / count as f64;
                let mut ss = 0.0f64;
                for_group(kind, gi, n, c, hw, |i| {
                    let d = src[i].as_f64() - mean;
                    ss += d * d;
                });
                (mean, ss / count as f64)
            } else {
                let r = running.expect("checked above");
                (self.store.buffer(r.mean).data()[gi].as_f64(), self.store.buffer(r.var).data()[gi].as_f64())
            };
            means[gi] = T::from_f64_lossy(mean);
            vars[gi] = T::from_f64_lossy(var);
            let is = T::one() / (T::from_f64_lossy(var) + eps_t).sqrt();
            inv_std[gi] = is;
            let m = T::from_f64_lossy(mean);
            for_group(kind, gi, n, c, hw, |i| out[i] = (src[i] - m) * is);
        }
        if use_batch && self.train {
            if let (Some(r), NormKind::Batch) = (running, kind) {
                let mom = T::from_f64_lossy(r.momentum);
                let unbias = T::from_f64_lossy(count as f64 / (count as f64 - 1.0));
                let rm = self.store.buffer(r.mean);
                let rv = self.store.buffer(r.var);
                let new_m: Vec<T> =
                    rm.data().iter().zip(&means).map(|(&a, &b)| (T::one() - mom) * a + mom * b).collect();
                let new_v: Vec<T> =
                    rv.data().iter().zip(&vars).map(|(&a, &b)| (T::one() - mom) * a + mom * b * unbias).collect();
                self.buffer_updates.push((r.mean, Tensor::new(rm.shape().to_vec(), new_m)?));
                self.buffer_updates.push((r.var, Tensor::new(rv.shape().to_vec(), new_v)?));
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::Normalize { x, kind, inv_std, batch_stats: use_batch }, &[x]))
    }

    /// `y[n, c, ...] = x[n, c, ...] * gamma[c] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c {
            return shape_err("channel_affine parameter length");
        }
        let hw = h * w;
        let out: Vec<T> =
            self.value(x).data().iter().enumerate().map(|(i, &v)| v * gv[(i / hw) % c] + bv[(i / hw) % c]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(value, Op::LeakyRelu { x, slope: s }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("elementwise shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let geom = ConvGeom::square(k, stride, pad);
        let (oh, ow) = match (geom.out_dim(h, k), geom.out_dim(w, k)) {
            (Some(a), Some(b)) => (a, b),
            _ => return shape_err("pool window does not fit"),
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for i in 0..k {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..k {
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = plane * h * w + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || src[idx] > best {
                                best = src[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let src = self.value(x).data();
        let out: Vec<T> =
            src.chunks(h * w).map(|p| T::from_f64_lossy(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw)).collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// `x[N, K] · w[M, K]ᵀ + b[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = match self.shape(x) {
            &[n, k] => (n, k),
            s => return shape_err(format!("linear input must be 2-D, got {s:?}")),
        };
        let m = match self.shape(w) {
            &[m, k2] if k2 == k => m,
            s => return shape_err(format!("linear weight {s:?} vs input width {k}")),
        };
        let mut out = vec![T::zero(); n * m];
        gemm(
            self.value(x).data(),
            MatLayout::plain(n, k),
            self.value(w).data(),
            MatLayout::t(m, k),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v = *v + bb;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Mean (optionally class-weighted) negative log-likelihood of softmax(logits).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (n, c) = match self.shape(logits) {
            &[n, c] => (n, c),
            s => return shape_err(format!("logits must be 2-D, got {s:?}")),
        };
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return shape_err("targets do not match logits");
        }
        let probs = softmax_rows(self.value(logits).data(), c);
        let weights: Vec<T> =
            targets.iter().map(|&t| T::from_f64_lossy(class_weights.map_or(1.0, |cw| cw[t]))).collect();
        let denom: T = weights.iter().copied().sum();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let p = probs[i * c + t];
            let p = if p < T::min_positive_value() { T::min_positive_value() } else { p };
            loss = loss - weights[i] * p.ln();
        }
        let value = Tensor::scalar(loss / denom);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, probs, targets: targets.to_vec(), weights, denom },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let t = T::from_f64_lossy(target);
        let v = self.value(x);
        let total: f64 = v
            .data()
            .iter()
            .map(|&z| {
                let z = z.as_f64();
                z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar(T::from_f64_lossy(total / v.numel() as f64));
        self.push(value, Op::BceWithLogits { x, target: t }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut param_grads = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            match node.op {
                Op::Param(id) => {
                    param_grads.insert(id, g);
                }
                Op::Input => grads[idx] = Some(g),
                _ => {}
            }
        }
        Ok(Gradients { params: param_grads, vars: grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let (n, c, h, wd) = self.value(*x).dims4()?;
                let (o, _, kh, kw) = self.value(*w).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let l = oh * ow;
                let k = c * kh * kw;
                let dy_cm = batch_to_channel_major(gd, n, o, l);
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db: Vec<T> = dy_cm.chunks(n * l).map(|r| r.iter().copied().sum()).collect();
                        accumulate(grads, *b, Tensor::new(vec![o], db)?);
                    }
                }
                let plane = Plane { n, c, h, w: wd };
                if self.needs(*w) {
                    let cols = im2col(self.value(*x).data(), plane, *geom, oh, ow);
                    let mut dw = vec![T::zero(); o * k];
                    gemm(&dy_cm, MatLayout::plain(o, n * l), &cols, MatLayout::t(k, n * l), T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); k * n * l];
                    gemm(
                        self.value(*w).data(),
                        MatLayout::t(o, k),
                        &dy_cm,
                        MatLayout::plain(o, n * l),
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, plane, *geom, oh, ow);
                    accumulate(grads, *x, Tensor::new(vec![n, c, h, wd], dx)?);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, ci, h, wd) = self.value(*x).dims4()?;
                let (_, co, kh, kw) = self.value(*w).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let l = h * wd;
                let k = co * kh * kw;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let plane = oh * ow;
                        let mut db = vec![T::zero(); co];
                        for (i, &v) in gd.iter().enumerate() {
                            db[(i / plane) % co] = db[(i / plane) % co] + v;
                        }
                        accumulate(grads, *b, Tensor::new(vec![co], db)?);
                    }
                }
                let dcols = im2col(gd, Plane { n, c: co, h: oh, w: ow }, *geom, h, wd);
                if self.needs(*w) {
                    let x_cm = batch_to_channel_major(self.value(*x).data(), n, ci, l);
                    let mut dw = vec![T::zero(); ci * k];
                    gemm(&x_cm, MatLayout::plain(ci, n * l), &dcols, MatLayout::t(k, n * l), T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if self.needs(*x) {
                    let mut dx_cm = vec![T::zero(); ci * n * l];
                    gemm(
                        self.value(*w).data(),
                        MatLayout::plain(ci, k),
                        &dcols,
                        MatLayout::plain(k, n * l),
                        T::zero(),
                        &mut dx_cm,
                    );
                    let dx = channel_major_to_batch(&dx_cm, n, ci, l);
                    accumulate(grads, *x, Tensor::new(vec![n, ci, h, wd], dx)?);
                }
            }
            Op::ReflectPad { x, pad } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..ph {
                        let sy = reflect(y as isize - *pad as isize, h);
                        for xx in 0..pw {
                            let sx = reflect(xx as isize - *pad as isize, w);
                            let d = &mut dx[plane * h * w + sy * w + sx];
                            *d = *d + gd[plane * ph * pw + y * pw + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Normalize { x, kind, inv_std, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xhat = node.value.data();
                let mut dx = vec![T::zero(); xhat.len()];
                let count = match kind {
                    NormKind::Batch => n * hw,
                    NormKind::Instance => hw,
                } as f64;
                for (gi, &is) in inv_std.iter().enumerate() {
                    if *batch_stats {
                        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                        for_group(*kind, gi, n, c, hw, |i| {
                            sg += gd[i].as_f64();
                            sgx += gd[i].as_f64() * xhat[i].as_f64();
                        });
                        let mg = T::from_f64_lossy(sg / count);
                        let mgx = T::from_f64_lossy(sgx / count);
                        for_group(*kind, gi, n, c, hw, |i| dx[i] = is * (gd[i] - mg - xhat[i] * mgx));
                    } else {
                        for_group(*kind, gi, n, c, hw, |i| dx[i] = gd[i] * is);
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    let dx: Vec<T> = gd.iter().enumerate().map(|(i, &v)| v * gv[(i / hw) % c]).collect();
                    accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (i, &v) in gd.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dg[ch] = dg[ch] + v * xv[i];
                    db[ch] = db[ch] + v;
                }
                accumulate(grads, *gamma, Tensor::new(vec![c], dg)?);
                accumulate(grads, *beta, Tensor::new(vec![c], db)?);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { g * *slope }).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Tanh { x } => {
                let yv = node.value.data();
                let dx = gd.iter().zip(yv).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Sigmoid { x } => {
                let yv = node.value.data();
                let dx = gd.iter().zip(yv).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(av).map(|(&g, &y)| g * y).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(g.shape().to_vec(), db)?);
            }
            Op::Scale { x, s } => accumulate(grads, *x, g.map(|v| v * *s)),
            Op::AddScalar { x } => accumulate(grads, *x, g.clone()),
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| g * v.signum() * if v == T::zero() { T::zero() } else { T::one() })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                let two = T::from_f64_lossy(2.0);
                let dx = gd.iter().zip(xv).map(|(&g, &v)| g * two * v).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Mean { x } => {
                let nel = self.value(*x).numel();
                let v = gd[0] / T::from_usize(nel).unwrap();
                accumulate(grads, *x, Tensor::full(self.shape(*x), v));
            }
            Op::Sum { x } => accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0])),
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] = d[src] + gd[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = vec![T::zero(); n * c * hw];
                for (p, chunk) in dx.chunks_mut(hw).enumerate() {
                    chunk.fill(gd[p] * inv);
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    gemm(gd, MatLayout::plain(n, m), self.value(*w).data(), MatLayout::plain(m, k), T::zero(), &mut dx);
                    accumulate(grads, *x, Tensor::new(vec![n, k], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); m * k];
                    gemm(gd, MatLayout::t(n, m), self.value(*x).data(), MatLayout::plain(n, k), T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(vec![m, k], dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); m];
                    for row in gd.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![m], db)?);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets, weights, denom } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / *denom;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] = dl[i * c + t] - T::one();
                    for v in dl[i * c..(i + 1) * c].iter_mut() {
                        *v = *v * weights[i] * scale;
                    }
                }
                accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), dl)?);
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x);
                let scale = gd[0] / T::from_usize(xv.numel()).unwrap();
                let dx = xv.map(|z| (sigmoid(z) - *target) * scale);
                accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.shape(*x))?;
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, T::one()),
        slot @ None => *slot = Some(g),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn for_group(kind: NormKind, gi: usize, n: usize, c: usize, hw: usize, mut f: impl FnMut(usize)) {
    match kind {
        NormKind::Instance => (gi * hw..(gi + 1) * hw).for_each(f),
        NormKind::Batch => {
            for b in 0..n {
                let start = (b * c + gi) * hw;
                (start..start + hw).for_each(&mut f);
            }
        }
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Row-wise numerically stable softmax of a `[rows, c]` buffer.
pub fn softmax_rows<T: Scalar>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(c).zip(out.chunks_mut(c)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            s = s + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / s;
        }
    }
    out
}
