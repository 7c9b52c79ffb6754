//! Recording tape and the differentiable primitives.
//!
//! Every primitive evaluates eagerly, appends one node holding its output and
//! whatever it needs for the vector-Jacobian product, and returns a [`Var`]
//! handle. [`Tape::backward`] walks the nodes in exact reverse order of
//! recording.

use crate::conv::{self, ConvGeom};
use crate::error::{Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Number of spatial dimensions of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvDims {
    One,
    Two,
}

/// Stride is always 1 and padding always `same`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dims: ConvDims,
    pub groups: usize,
}

impl ConvSpec {
    pub fn dense(dims: ConvDims) -> Self {
        Self { dims, groups: 1 }
    }

    pub fn depthwise(dims: ConvDims, channels: usize) -> Self {
        Self { dims, groups: channels }
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MeanLast(Var),
    Reshape(Var),
    TransposeLast2(Var),
    Swish(Var),
    Gelu(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_COEF: f64 = 0.044715;

#[inline]
fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::Shape { op, expected: expected.into(), got: got.to_vec() }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor of `v`'s shape; zeros if `v` was unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches its value"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?}", va.shape()), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?}", va.shape()), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape().to_vec(), |i| vx.data()[i] * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(shape_err("mean_last", "rank >= 1", shape));
        };
        if n == 0 {
            return Err(shape_err("mean_last", "non-empty last axis", shape));
        }
        let inv = T::one() / T::lit(n as f64);
        let data = vx.data().chunks_exact(n).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(lead.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanLast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if shape.len() < 2 {
            return Err(shape_err("transpose", "rank >= 2", shape));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out_shape = shape.to_vec();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let mut data = vec![T::zero(); vx.numel()];
        transpose_blocks(vx.data(), &mut data, r, c);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::TransposeLast2(x), rg))
    }

    /// `x * logistic(x)`
    pub fn swish(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape().to_vec(), |i| {
            let v = vx.data()[i];
            v * logistic(v)
        });
        let rg = self.rg(x);
        self.push(out, Op::Swish(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let a = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(GELU_COEF);
        let half = T::lit(0.5);
        let out = Tensor::from_fn(vx.shape().to_vec(), |i| {
            let v = vx.data()[i];
            half * v * (T::one() + (a * (v + c * v * v * v)).tanh())
        });
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Grouped convolution, stride 1, `same` padding.
    ///
    /// Layouts: 1-D `x: [B, C, L]`, `w: [Cout, C / groups, K]`;
    /// 2-D `x: [B, C, H, W]`, `w: [Cout, C / groups, KH, KW]`; `b: [Cout]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = match spec.dims {
            ConvDims::One => {
                if xs.len() != 3 || ws.len() != 3 {
                    return Err(shape_err("conv1d", "x [B,C,L] and w [O,C/g,K]", &xs));
                }
                ConvGeom {
                    batch: xs[0],
                    cin: xs[1],
                    cout: ws[0],
                    h: 1,
                    w: xs[2],
                    kh: 1,
                    kw: ws[2],
                    groups: spec.groups,
                }
            }
            ConvDims::Two => {
                if xs.len() != 4 || ws.len() != 4 {
                    return Err(shape_err("conv2d", "x [B,C,H,W] and w [O,C/g,KH,KW]", &xs));
                }
                ConvGeom {
                    batch: xs[0],
                    cin: xs[1],
                    cout: ws[0],
                    h: xs[2],
                    w: xs[3],
                    kh: ws[2],
                    kw: ws[3],
                    groups: spec.groups,
                }
            }
        };
        if geom.groups == 0 || geom.cin % geom.groups != 0 {
            return Err(TensorError::Groups { channels: geom.cin, groups: geom.groups });
        }
        if geom.cout % geom.groups != 0 {
            return Err(TensorError::Groups { channels: geom.cout, groups: geom.groups });
        }
        if ws[1] != geom.cin / geom.groups || geom.kh == 0 || geom.kw == 0 {
            return Err(shape_err("conv", format!("w[1] = {}", geom.cin / geom.groups), &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err("conv bias", format!("[{}]", geom.cout), self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); geom.out_len()];
        conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut out_shape = xs.clone();
        out_shape[1] = geom.cout;
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        self.conv(x, w, b, ConvSpec { dims: ConvDims::One, groups })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        self.conv(x, w, b, ConvSpec { dims: ConvDims::Two, groups })
    }

    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(shape_err(op, "[B, C, ...]", xs));
        }
        let (b, c) = (xs[0], xs[1]);
        if b == 0 {
            return Err(TensorError::EmptyBatch { op });
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err(op, format!("affine [{c}]"), self.shape(p)));
            }
        }
        let spatial = xs[2..].iter().product();
        Ok((b, c, spatial))
    }

    /// Training-mode batch norm over axis 1 of `[B, C, ...]`, normalizing by
    /// the batch statistics. Returns the statistics for the caller's running
    /// estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (nb, c, sp) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let vx = self.value(x).data();
        let count = nb * sp;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let planes = (0..nb).map(|b| &vx[(b * c + ch) * sp..][..sp]);
            let s: f64 = planes.clone().flat_map(|p| p.iter()).map(|v| v.as_f64()).sum();
            let m = s / count as f64;
            let ss: f64 = planes.flat_map(|p| p.iter()).map(|v| (v.as_f64() - m).powi(2)).sum();
            let v = ss / count as f64;
            mean[ch] = T::lit(m);
            var[ch] = T::lit(v);
            inv_std[ch] = T::lit(1.0 / (v + eps).sqrt());
        }
        let stats = BatchStats { mean: mean.clone(), var, count };
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm using externally held running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.channel_layout("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", format!("running stats [{c}]"), &[running_mean.len()]));
        }
        let inv_std = running_var.iter().map(|&v| T::lit(1.0 / (v.as_f64() + eps).sqrt())).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, batch_stats: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (nb, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for b in 0..nb {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    let h = (vx[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg))
    }

    /// Layer norm over the last axis, population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("layer_norm", "rank >= 1", &shape))?;
        if n < 1 {
            return Err(shape_err("layer_norm", "axis extent >= 1", &shape));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(shape_err("layer_norm", format!("affine [{n}]"), self.shape(p)));
            }
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = vx.len() / n;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx[r * n..(r + 1) * n];
            let m = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let v = row.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[r] = T::lit(is);
            let (m, is) = (T::lit(m), T::lit(is));
            for i in 0..n {
                let h = (row[i] - m) * is;
                xhat[r * n + i] = h;
                out[r * n + i] = g[i] * h + bt[i];
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Affine map along the last axis: `y = x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err("linear", format!("x [..., in] against w {ws:?}"), &xs));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(shape_err("linear bias", format!("[{n_out}]"), self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / n_in.max(1);
        let mut out = vec![T::zero(); rows * n_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(n_out) {
                r.copy_from_slice(bv);
            }
        }
        gemm(
            MatRef::rm(self.value(x).data(), rows, n_in),
            MatRef::rm_t(self.value(w).data(), n_in, n_out),
            T::one(),
            &mut out,
        );
        let mut out_shape = xs;
        *out_shape.last_mut().expect("rank >= 1") = n_out;
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Mean binary cross-entropy over all elements, computed from logits in
    /// the overflow-free form `max(z, 0) - z t + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", format!("{:?}", z.shape()), targets.shape()));
        }
        if let Some(&t) = targets.data().iter().find(|&&t| !(t >= T::zero() && t <= T::one())) {
            return Err(TensorError::TargetRange(t.as_f64()));
        }
        let n = z.numel().max(1) as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.as_f64(), t.as_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let out = Tensor::scalar(T::lit(total / n));
        let rg = self.rg(logits);
        Ok(self.push(out, Op::BceWithLogits { logits, targets: targets.data().to_vec() }, rg))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into any
    /// buffers already present.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.accumulate(loss, |g| g[0] += T::one());
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &gy);
            self.grads[idx] = Some(gy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, gy: &[T]) {
        // The op is moved out so the tape can be borrowed mutably while its
        // saved tensors are read.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data().to_vec();
                let vb = self.value(*b).data().to_vec();
                self.accumulate(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * vb[i];
                    }
                });
                self.accumulate(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(*x, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * c));
            }
            Op::Sum(x) => {
                let d = gy[0];
                self.accumulate(*x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::MeanLast(x) => {
                let n = *self.shape(*x).last().expect("rank >= 1");
                let inv = T::one() / T::lit(n as f64);
                self.accumulate(*x, |g| {
                    for (row, &d) in g.chunks_exact_mut(n).zip(gy) {
                        row.iter_mut().for_each(|g| *g += d * inv);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(*x, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut back = vec![T::zero(); gy.len()];
                transpose_blocks(gy, &mut back, c, r);
                self.accumulate(*x, |g| g.iter_mut().zip(&back).for_each(|(g, &d)| *g += d));
            }
            Op::Swish(x) => {
                let vx = self.value(*x).data().to_vec();
                self.accumulate(*x, |g| {
                    for i in 0..g.len() {
                        let s = logistic(vx[i]);
                        g[i] += gy[i] * s * (T::one() + vx[i] * (T::one() - s));
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data().to_vec();
                let a = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let c = T::lit(GELU_COEF);
                let c3 = T::lit(3.0 * GELU_COEF);
                let half = T::lit(0.5);
                self.accumulate(*x, |g| {
                    for i in 0..g.len() {
                        let v = vx[i];
                        let t = (a * (v + c * v * v * v)).tanh();
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * a * (T::one() + c3 * v * v);
                        g[i] += gy[i] * d;
                    }
                });
            }
            Op::Conv { x, w, b, geom } => {
                let vx = self.value(*x).data().to_vec();
                let vw = self.value(*w).data().to_vec();
                let mut dx = self.rg(*x).then(|| vec![T::zero(); vx.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); vw.len()]);
                let mut db = b.filter(|&b| self.rg(b)).map(|_| vec![T::zero(); geom.cout]);
                conv::backward(geom, &vx, &vw, gy, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                self.add_grad(*x, dx);
                self.add_grad(*w, dw);
                if let Some(b) = b {
                    self.add_grad(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.shape(*x).to_vec();
                let (nb, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..nb {
                    for ch in 0..c {
                        let off = (b * c + ch) * sp;
                        for i in off..off + sp {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let count = T::lit((nb * sp) as f64);
                    let mut dx = vec![T::zero(); gy.len()];
                    for b in 0..nb {
                        for ch in 0..c {
                            let off = (b * c + ch) * sp;
                            for i in off..off + sp {
                                dx[i] = if *batch_stats {
                                    // dxhat = gy * gamma; the two batch sums are
                                    // dbeta * gamma and dgamma * gamma.
                                    g[ch] * inv_std[ch] / count
                                        * (count * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gy[i] * g[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.add_grad(*x, Some(dx));
                }
                self.add_grad(*gamma, Some(dgamma));
                self.add_grad(*beta, Some(dbeta));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = *self.shape(*x).last().expect("rank >= 1");
                let g = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dx = vec![T::zero(); gy.len()];
                let nt = T::lit(n as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &gy[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in 0..n {
                        dgamma[i] += gr[i] * hr[i];
                        dbeta[i] += gr[i];
                        let dh = gr[i] * g[i];
                        s1 += dh;
                        s2 += dh * hr[i];
                    }
                    for i in 0..n {
                        let dh = gr[i] * g[i];
                        dx[r * n + i] = is / nt * (nt * dh - s1 - hr[i] * s2);
                    }
                }
                self.add_grad(*x, Some(dx));
                self.add_grad(*gamma, Some(dgamma));
                self.add_grad(*beta, Some(dbeta));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w).to_vec();
                let (n_out, n_in) = (ws[0], ws[1]);
                let rows = gy.len() / n_out.max(1);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * n_in];
                    gemm(MatRef::rm(gy, rows, n_out), MatRef::rm(self.value(*w).data(), n_out, n_in), T::zero(), &mut dx);
                    self.add_grad(*x, Some(dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); n_out * n_in];
                    gemm(MatRef::rm_t(gy, n_out, rows), MatRef::rm(self.value(*x).data(), rows, n_in), T::zero(), &mut dw);
                    self.add_grad(*w, Some(dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); n_out];
                    for r in gy.chunks_exact(n_out) {
                        db.iter_mut().zip(r).for_each(|(d, &v)| *d += v);
                    }
                    self.add_grad(*b, Some(db));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data().to_vec();
                let scale = gy[0] / T::lit(z.len().max(1) as f64);
                self.accumulate(*logits, |g| {
                    for i in 0..g.len() {
                        g[i] += (logistic(z[i]) - targets[i]) * scale;
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }

    fn add_grad(&mut self, v: Var, delta: Option<Vec<T>>) {
        if let Some(delta) = delta {
            self.accumulate(v, |g| g.iter_mut().zip(&delta).for_each(|(g, &d)| *g += d));
        }
    }
}

/// Transposes each trailing `rows x cols` block of `src` into `dst`.
fn transpose_blocks<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    let block = rows * cols;
    if block == 0 {
        return;
    }
    for (s, d) in src.chunks_exact(block).zip(dst.chunks_exact_mut(block)) {
        for i in 0..rows {
            for j in 0..cols {
                d[j * rows + i] = s[i * cols + j];
            }
        }
    }
}
