use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Labels, Real, Tensor};

use super::kernels::{self, ConvShape};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    /// Input value, or any value that no trainable leaf depends on.
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize, pad: usize },
    MaxPool2x2 { x: Var, argmax: Vec<u32> },
    Upsample2x { x: Var },
    LeakyRelu { x: Var, slope: T },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    Softmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Vec<T> },
    Mse { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape { x: Var },
    Norm2 { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the tape is already topologically sorted and backward walks it in
/// reverse.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    branches: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), branches: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are accumulated for it during backward
    /// only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Hash of every piecewise branch taken so far: leaky-ReLU input signs
    /// and max-pool winners. Two evaluations with equal signatures lie on
    /// the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn mix_branches(&mut self, bits: impl Iterator<Item = u64>) {
        for b in bits {
            self.branches = (self.branches ^ b).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn nchw(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.nodes[v.0].value.nchw()
    }

    /// Stride-1 cross-correlation with "same" padding.
    ///
    /// `w` is `[Cout, Cin, k, k]` with `k ∈ {1, 3}` and `pad = (k - 1) / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.nchw(x)?;
        let (cout, wcin, k, k2) = self.nchw(w)?;
        if k != k2 || !(k == 1 || k == 3) {
            return shape_err(format!("conv kernel must be 1×1 or 3×3, got {}×{}", k, k2));
        }
        if pad != (k - 1) / 2 {
            return Err(Error::InvalidArgument(format!("padding {} does not preserve size for k={}", pad, k)));
        }
        if wcin != cin {
            return shape_err(format!("conv expects {} input channels, got {}", wcin, cin));
        }
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                return shape_err(format!("conv bias dims {:?}, expected [{}]", self.dims(b), cout));
            }
        }
        self.value(x).ensure_finite("conv2d input")?;
        let s = ConvShape { n, cin, cout, h, w: wd, k, pad };
        let out = kernels::conv2d_forward(&s, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::new([n, cout, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, Op::Conv2d { x, w, b, k, pad }))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max pooling needs even spatial extents, got {}×{}", h, w));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), n * c, h, w);
        self.mix_branches(argmax.iter().map(|&a| a as u64));
        let value = Tensor::new([n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, &[x], Op::MaxPool2x2 { x, argmax }))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        let out = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new([n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, &[x], Op::Upsample2x { x }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if slope < T::zero() {
            return Err(Error::InvalidArgument("leaky ReLU slope must be non-negative".into()));
        }
        let value = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        let signs: Vec<u64> = self
            .value(x)
            .data()
            .chunks(64)
            .map(|c| c.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i)))
            .collect();
        self.mix_branches(signs.into_iter());
        Ok(self.push(value, &[x], Op::LeakyRelu { x, slope }))
    }

    /// Per-(sample, channel) standardization without affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        if h * w < 2 {
            return shape_err(format!("instance norm needs at least 2 pixels per plane, got {}×{}", h, w));
        }
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), n * c, h * w, eps);
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(value, &[x], Op::InstanceNorm { x, inv_std }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.nchw(a)?;
        let (nb, cb, hb, wb) = self.nchw(b)?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!("concat of {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for ni in 0..n {
            out.extend_from_slice(&da[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&db[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        Ok(self.push(value, &[a, b], Op::Concat { a, b }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        if start + len > c || len == 0 {
            return shape_err(format!("channel slice {}..{} of {}", start, start + len, c));
        }
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            out.extend_from_slice(&d[(ni * c + start) * hw..(ni * c + start + len) * hw]);
        }
        let value = Tensor::new([n, len, h, w], out)?;
        Ok(self.push(value, &[x], Op::SliceChannels { x, start }))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        let out = kernels::softmax_channels(self.value(x).data(), n, c, h * w);
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(value, &[x], Op::Softmax { x }))
    }

    /// Mean per-pixel cross entropy of channel logits against a class map.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Labels) -> Result<Var> {
        let (n, c, h, w) = self.nchw(logits)?;
        if labels.dims() != [n, h, w] {
            return shape_err(format!("labels {:?} do not match logits {:?}", labels.dims(), self.dims(logits)));
        }
        if let Some(m) = labels.max_class() {
            if m as usize >= c {
                return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", m, c)));
            }
        }
        let hw = h * w;
        let probs = kernels::softmax_channels(self.value(logits).data(), n, c, hw);
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        for ni in 0..n {
            let base = ni * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(x[base + ci * hw + p].as_f64());
                }
                let lse = m + (0..c).map(|ci| (x[base + ci * hw + p].as_f64() - m).exp()).sum::<f64>().ln();
                let l = labels.data()[ni * hw + p] as usize;
                total += lse - x[base + l * hw + p].as_f64();
            }
        }
        let value = Tensor::scalar(T::of(total / (n * hw) as f64));
        Ok(self.push(value, &[logits], Op::CrossEntropy { logits, labels: labels.data().to_vec(), probs }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("mse of {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s: f64 = da.iter().zip(db).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
        let value = Tensor::scalar(T::of(s / da.len().max(1) as f64));
        Ok(self.push(value, &[a, b], Op::Mse { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values(a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values(a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], Op::Sub { a, b }))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("elementwise op on {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.dims(a).to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, &[x], Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Rank-2 product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 {
            return shape_err(format!("matmul needs rank-2 operands, got {:?} and {:?}", da, db));
        }
        let (m, ka) = if ta { (da[1], da[0]) } else { (da[0], da[1]) };
        let (kb, n) = if tb { (db[1], db[0]) } else { (db[0], db[1]) };
        if ka != kb {
            return shape_err(format!("matmul inner extents {} and {}", ka, kb));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b, ta, tb }))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims.to_vec())?;
        Ok(self.push(value, &[x], Op::Reshape { x }))
    }

    /// Euclidean norm of all elements.
    pub fn norm2(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64().powi(2)).sum();
        self.push(Tensor::scalar(T::of(s.sqrt())), &[x], Op::Norm2 { x })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Detached);
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return shape_err(format!("backward needs a scalar loss, got dims {:?}", node.value.dims()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.dims().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k, pad } => {
                let (n, cin, h, wd) = self.nchw(*x)?;
                let cout = self.dims(*w)[0];
                let s = ConvShape { n, cin, cout, h, w: wd, k: *k, pad: *pad };
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let (dx, dw, db) =
                    kernels::conv2d_backward(&s, self.value(*x).data(), self.value(*w).data(), g, need);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i as usize] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x { x } => {
                let (n, c, h, w) = self.nchw(*x)?;
                self.accumulate(grads, *x, kernels::upsample2x_backward(g, n * c, h, w));
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { *slope * gv })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = self.nchw(*x)?;
                let dx = kernels::instance_norm_backward(node.value.data(), inv_std, g, h * w);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.nchw(*a)?;
                let cb = self.dims(*b)[1];
                let hw = h * w;
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                for ni in 0..n {
                    let base = ni * (ca + cb) * hw;
                    ga.extend_from_slice(&g[base..base + ca * hw]);
                    gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.nchw(*x)?;
                let len = node.value.dims()[1];
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    let dst = (ni * c + start) * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&g[ni * len * hw..(ni + 1) * len * hw]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let (n, c, h, w) = self.nchw(*x)?;
                let hw = h * w;
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ni in 0..n {
                    let base = ni * c * hw;
                    for p in 0..hw {
                        let dot: T = (0..c).map(|ci| g[base + ci * hw + p] * y[base + ci * hw + p]).sum();
                        for ci in 0..c {
                            let i = base + ci * hw + p;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, c, h, w) = self.nchw(*logits)?;
                let hw = h * w;
                let scale = g[0] / T::of((n * hw) as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for ni in 0..n {
                    for p in 0..hw {
                        let l = labels[ni * hw + p] as usize;
                        dx[ni * c * hw + l * hw + p] -= scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Mse { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let scale = g[0] * T::of(2.0 / da.len().max(1) as f64);
                let diff: Vec<T> = da.iter().zip(db).map(|(&x, &y)| (x - y) * scale).collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, diff.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, diff);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = if *ta { (va.dims()[1], va.dims()[0]) } else { (va.dims()[0], va.dims()[1]) };
                let n = node.value.dims()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        // stored [k, m] = op(b) · gᵀ
                        matmul_into(k, n, m, vb.data(), *tb, g, true, &mut da, false);
                    } else {
                        // [m, k] = g · op(b)ᵀ
                        matmul_into(m, n, k, g, false, vb.data(), !*tb, &mut da, false);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        // stored [n, k] = gᵀ · op(a)
                        matmul_into(n, m, k, g, true, va.data(), *ta, &mut db, false);
                    } else {
                        // [k, n] = op(a)ᵀ · g
                        matmul_into(k, m, n, va.data(), !*ta, g, false, &mut db, false);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Norm2 { x } => {
                let nrm = node.value.data()[0];
                let dx = if nrm > T::zero() {
                    self.value(*x).data().iter().map(|&v| v / nrm * g[0]).collect()
                } else {
                    vec![T::zero(); self.value(*x).numel()]
                };
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}
