//! Wengert tape: forward operations are recorded in execution order and the
//! reverse pass walks the record backwards applying each vector-Jacobian
//! product.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance guard inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight given to the previous running statistic on each update.
pub const BN_MOMENTUM: f64 = 0.9;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Running per-channel statistics used by batch normalization in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving average with [`BN_MOMENTUM`].
    pub fn absorb(&mut self, batch: &BatchMoments<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + one_m * *b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = m * *r + one_m * *b;
        }
    }
}

/// Batch statistics observed by a train-mode normalization.
///
/// `var` carries the unbiased estimate; the forward pass itself normalizes by
/// the biased one.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
        geom: ConvGeom,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Scale(usize, T),
    GlobalAvgPool(usize),
    AvgPool {
        x: usize,
        k: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Resize {
        x: usize,
        rows: Vec<Vec<(usize, f64)>>,
        cols: Vec<Vec<(usize, f64)>>,
    },
    Bce {
        p: usize,
        labels: Vec<T>,
    },
    Sum(usize),
    WeightedSum {
        x: usize,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended as operations run, so every input precedes its
/// consumers.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    /// 2-D cross-correlation over NCHW input with a `K×C×kh×kw` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, ki, bi) = (self.idx(input)?, self.idx(kernel)?, self.idx(bias)?);
        let x = &self.nodes[xi].value;
        let k = &self.nodes[ki].value;
        let b = &self.nodes[bi].value;
        let [n, c, h, w] = x.dims4()?;
        let [kc_out, kc_in, kh, kw] = k.dims4()?;
        if kc_in != c {
            return Err(mismatch("conv2d", x.shape(), k.shape()));
        }
        if b.shape() != [kc_out] {
            return Err(mismatch("conv2d bias", k.shape(), b.shape()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch("conv2d (kernel larger than padded input)", x.shape(), k.shape()));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let out_plane = oh * ow;
        let mut out = vec![T::zero(); n * kc_out * out_plane];
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); geom.col_rows() * geom.col_cols()]
        };
        for s in 0..n {
            let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
            let dst = &mut out[s * kc_out * out_plane..(s + 1) * kc_out * out_plane];
            for (ko, row) in dst.chunks_mut(out_plane).enumerate() {
                row.fill(b.data()[ko]);
            }
            let cols: &[T] = if geom.is_pointwise() {
                xs
            } else {
                kernels::im2col(xs, &geom, &mut col);
                &col
            };
            kernels::gemm(
                false,
                false,
                kc_out,
                geom.col_rows(),
                out_plane,
                k.data(),
                cols,
                T::one(),
                dst,
            );
        }
        let rg = self.rg(xi) || self.rg(ki) || self.rg(bi);
        let value = Tensor::new(vec![n, kc_out, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: xi,
                k: ki,
                b: bi,
                geom,
            },
            rg,
        ))
    }

    /// `input (N×F) · weights (F×G) + bias (G)`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(input)?, self.idx(weights)?, self.idx(bias)?);
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let b = &self.nodes[bi].value;
        let [n, f] = x.dims2()?;
        let [wf, g] = w.dims2()?;
        if wf != f {
            return Err(mismatch("dense", x.shape(), w.shape()));
        }
        if b.shape() != [g] {
            return Err(mismatch("dense bias", w.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(n * g);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        kernels::gemm(false, false, n, f, g, x.data(), w.data(), T::one(), &mut out);
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        let value = Tensor::new(vec![n, g], out)?;
        Ok(self.push(value, Op::Dense { x: xi, w: wi, b: bi }, rg))
    }

    /// Per-channel normalization of an NCHW (or N×C) tensor.
    ///
    /// Train mode normalizes by the batch statistics and returns them so the
    /// caller can fold them into `running`; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let (xi, gi, bi) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let x = &self.nodes[xi].value;
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "batch_norm needs N×C[×H×W]".into(),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        let gm = self.nodes[gi].value.data();
        let bt = self.nodes[bi].value.data();
        if gm.len() != c || bt.len() != c || running.channels() != c {
            return Err(mismatch(
                "batch_norm parameters",
                &shape,
                &[gm.len(), bt.len(), running.channels()],
            ));
        }
        let count = n * plane;
        let eps = T::from_f64(BN_EPS);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut moments = None;
        match mode {
            Mode::Train => {
                let cnt = T::from_f64(count as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for &v in &xd[base..base + plane] {
                            mean[ch] = mean[ch] + v;
                        }
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / cnt;
                }
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for &v in &xd[base..base + plane] {
                            let d = v - mean[ch];
                            var[ch] = var[ch] + d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / cnt;
                }
                let bessel = if count > 1 {
                    T::from_f64(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                moments = Some(BatchMoments {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * bessel).collect(),
                });
            }
            Mode::Eval => {
                mean.copy_from_slice(&running.mean);
                var.copy_from_slice(&running.var);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for p in base..base + plane {
                    let h = (xd[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = h;
                    out[p] = gm[ch] * h + bt[ch];
                }
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        );
        Ok((v, moments))
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, op(xi), rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    /// `1 / (1 + exp(-x))`, evaluated without overflow for large |x|.
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(
            input,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid,
        )
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.unary(input, |v| v * factor, |i| Op::Scale(i, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.shape() != y.shape() {
            return Err(mismatch("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Add(ai, bi), rg))
    }

    /// NCHW → N×C spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::GlobalAvgPool(xi), rg))
    }

    /// Non-overlapping `k×k` mean pooling (trailing rows/columns dropped).
    pub fn avg_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let [n, c, h, w] = x.dims4()?;
        if k == 0 || k > h || k > w {
            return Err(Error::InvalidArgument(format!(
                "avg_pool window {k} does not fit {h}×{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..k {
                        for j in 0..k {
                            acc = acc + src[(oy * k + i) * w + ox * k + j];
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::AvgPool { x: xi, k }, rg))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let xi = self.idx(input)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let x = &self.nodes[xi].value;
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Dropout { x: xi, mask }, rg))
    }

    /// Area-average resampling of every plane of an NCHW tensor.
    pub fn resize_area(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::InvalidArgument("resize target must be at least 1×1".into()));
        }
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let [n, c, h, w] = x.dims4()?;
        if (h, w) == (target_h, target_w) {
            return Ok(input);
        }
        let rows = kernels::area_weights(h, target_h);
        let cols = kernels::area_weights(w, target_w);
        let data =
            kernels::resample_planes(x.data(), n * c, (h, w), (target_h, target_w), &rows, &cols);
        let value = Tensor::new(vec![n, c, target_h, target_w], data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Resize { x: xi, rows, cols }, rg))
    }

    /// Mean binary cross-entropy; probabilities are clamped into
    /// `[1e-7, 1 - 1e-7]` before the logarithm.
    pub fn bce_loss(&mut self, prob: Var, labels: &[T]) -> Result<Var> {
        let pi = self.idx(prob)?;
        let p = &self.nodes[pi].value;
        if p.numel() != labels.len() {
            return Err(mismatch("bce_loss", p.shape(), &[labels.len()]));
        }
        let (lo, hi) = bce_bounds::<T>();
        let mut acc = 0.0f64;
        for (&pv, &y) in p.data().iter().zip(labels) {
            let pc = pv.max(lo).min(hi).as_f64();
            let y = y.as_f64();
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let value = Tensor::scalar(T::from_f64(acc / labels.len() as f64));
        let rg = self.rg(pi);
        Ok(self.push(
            value,
            Op::Bce {
                p: pi,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let s = self.nodes[xi].value.data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), rg))
    }

    /// Scalar `Σ weights ⊙ input`.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        if x.numel() != weights.len() {
            return Err(mismatch("weighted_sum", x.shape(), &[weights.len()]));
        }
        let s = x
            .data()
            .iter()
            .zip(weights)
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        let rg = self.rg(xi);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x: xi,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let want = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                let xd = val(*x).data();
                let kd = val(*k).data();
                let kout = val(*k).shape()[0];
                let n = val(*x).shape()[0];
                let in_sz = geom.c * geom.h * geom.w;
                let out_plane = geom.oh * geom.ow;
                let rows = geom.col_rows();
                let mut dk = want(*k).then(|| vec![T::zero(); kd.len()]);
                let mut db = want(*b).then(|| vec![T::zero(); kout]);
                let mut dx = want(*x).then(|| vec![T::zero(); xd.len()]);
                let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * out_plane }];
                let mut dcol = vec![T::zero(); if dx.is_some() { rows * out_plane } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * kout * out_plane..(s + 1) * kout * out_plane];
                    if let Some(db) = db.as_mut() {
                        for (ko, row) in gs.chunks(out_plane).enumerate() {
                            db[ko] = row.iter().fold(db[ko], |a, &v| a + v);
                        }
                    }
                    let xs = &xd[s * in_sz..(s + 1) * in_sz];
                    if let Some(dk) = dk.as_mut() {
                        let cols: &[T] = if geom.is_pointwise() {
                            xs
                        } else {
                            kernels::im2col(xs, geom, &mut col);
                            &col
                        };
                        kernels::gemm(false, true, kout, out_plane, rows, gs, cols, T::one(), dk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
                        if geom.is_pointwise() {
                            kernels::gemm(true, false, rows, kout, out_plane, kd, gs, T::one(), dxs);
                        } else {
                            kernels::gemm(true, false, rows, kout, out_plane, kd, gs, T::zero(), &mut dcol);
                            kernels::col2im(&dcol, geom, dxs);
                        }
                    }
                }
                accumulate(grads, *k, dk);
                accumulate(grads, *b, db);
                accumulate(grads, *x, dx);
            }
            Op::Dense { x, w, b } => {
                let [n, f] = [val(*x).shape()[0], val(*x).shape()[1]];
                let gdim = val(*w).shape()[1];
                let dx = want(*x).then(|| {
                    let mut d = vec![T::zero(); n * f];
                    kernels::gemm(false, true, n, gdim, f, g, val(*w).data(), T::zero(), &mut d);
                    d
                });
                let dw = want(*w).then(|| {
                    let mut d = vec![T::zero(); f * gdim];
                    kernels::gemm(true, false, f, n, gdim, val(*x).data(), g, T::zero(), &mut d);
                    d
                });
                let db = want(*b).then(|| {
                    let mut d = vec![T::zero(); gdim];
                    for row in g.chunks(gdim) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    d
                });
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = val(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let gm = val(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for p in base..base + plane {
                            sum_g[ch] = sum_g[ch] + g[p];
                            sum_gx[ch] = sum_gx[ch] + g[p] * xhat[p];
                        }
                    }
                }
                let dx = want(*x).then(|| {
                    let mut d = vec![T::zero(); g.len()];
                    let m = T::from_f64((n * plane) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let k = gm[ch] * inv_std[ch];
                            for p in base..base + plane {
                                d[p] = if *batch_stats {
                                    k * (g[p] - sum_g[ch] / m - xhat[p] * sum_gx[ch] / m)
                                } else {
                                    k * g[p]
                                };
                            }
                        }
                    }
                    d
                });
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, want(*gamma).then_some(sum_gx));
                accumulate(grads, *beta, want(*beta).then_some(sum_g));
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Some(d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, Some(d));
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, Some(g.to_vec()));
                }
                if want(*b) {
                    accumulate(grads, *b, Some(g.to_vec()));
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, Some(g.iter().map(|&v| v * *f).collect()));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).dims4().expect("rank checked in forward");
                let plane = h * w;
                let inv = T::from_f64(1.0 / plane as f64);
                let mut d = Vec::with_capacity(g.len() * plane);
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * inv, plane));
                }
                accumulate(grads, *x, Some(d));
            }
            Op::AvgPool { x, k } => {
                let [_, _, h, w] = val(*x).dims4().expect("rank checked in forward");
                let [_, _, oh, ow] = node.value.dims4().expect("rank checked in forward");
                let inv = T::from_f64(1.0 / (k * k) as f64);
                let mut d = vec![T::zero(); val(*x).numel()];
                for (p, gp) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = gp[oy * ow + ox] * inv;
                            for i in 0..*k {
                                for j in 0..*k {
                                    dst[(oy * k + i) * w + ox * k + j] = v;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, Some(d));
            }
            Op::Dropout { x, mask } => {
                let d = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(grads, *x, Some(d));
            }
            Op::Resize { x, rows, cols } => {
                let [n, c, h, w] = val(*x).dims4().expect("rank checked in forward");
                let d = kernels::resample_planes_adjoint(
                    g,
                    n * c,
                    (h, w),
                    (rows.len(), cols.len()),
                    rows,
                    cols,
                );
                accumulate(grads, *x, Some(d));
            }
            Op::Bce { p, labels } => {
                let (lo, hi) = bce_bounds::<T>();
                let inv_n = T::from_f64(1.0 / labels.len() as f64);
                let d = val(*p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &y)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            g[0] * inv_n * ((T::one() - y) / (T::one() - pv) - y / pv)
                        }
                    })
                    .collect();
                accumulate(grads, *p, Some(d));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Some(vec![g[0]; val(*x).numel()]));
            }
            Op::WeightedSum { x, weights } => {
                accumulate(grads, *x, Some(weights.iter().map(|&w| w * g[0]).collect()));
            }
        }
    }
}

fn bce_bounds<T: Scalar>() -> (T, T) {
    (T::from_f64(1e-7), T::from_f64(1.0 - 1e-7))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, contrib: Option<Vec<T>>) {
    let Some(c) = contrib else { return };
    match &mut grads[i] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(c) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::ForeignVar);
        }
        let shape = self.shapes[v.index].clone();
        match &self.grads[v.index] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct nested-loop cross-correlation used as an oracle for im2col+gemm.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let [n, c, h, w] = x.dims4().unwrap();
        let [ko, _, kh, kw] = k.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * ko * oh * ow];
        for s in 0..n {
            for o in 0..ko {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((s * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((o * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((s * ko + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, ko, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_diagonal_kernel_sums_diagonal() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let expected = conv_oracle(&x, &k, &[0.0], 1, 0);
        assert_eq!(expected.data(), &[5.0]);
        let mut tape = Tape::<f64>::new();
        let (xv, kv) = (tape.constant(x), tape.constant(k));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(xv, kv, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).unwrap(), &expected);
    }

    #[test]
    fn conv_padded_ones() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let expected = conv_oracle(&x, &k, &[0.0], 1, 1);
        assert_eq!(expected.data()[4], 9.0);
        assert_eq!(expected.data()[0], 4.0);
        let mut tape = Tape::<f64>::new();
        let (xv, kv) = (tape.constant(x), tape.constant(k));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(xv, kv, b, 1, 1).unwrap();
        let out = tape.value(y).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out, &expected);
    }

    #[test]
    fn conv_matches_oracle_with_stride_and_channels() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(
            vec![2, 3, 7, 6],
            (0..252).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let k = Tensor::new(
            vec![4, 3, 3, 3],
            (0..108).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let bias = [0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, 0), (2, 1), (3, 2)] {
            let expected = conv_oracle(&x, &k, &bias, stride, pad);
            let mut tape = Tape::<f64>::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            let b = tape.constant(t(&[4], &bias));
            let y = tape.conv2d(xv, kv, b, stride, pad).unwrap();
            assert!(tape.value(y).unwrap().max_abs_diff(&expected) < 1e-12);
            assert_eq!(tape.value(y).unwrap().shape(), expected.shape());
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let err = tape.conv2d(x, k, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
        assert!(tape.conv2d(x, x, b, 0, 0).is_err());
    }

    #[test]
    fn dense_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[3.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0]);

        let x2 = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let zw = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let bb = tape.constant(t(&[2], &[0.5, -1.5]));
        let y = tape.dense(x2, zw, bb).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

        assert!(tape.dense(x2, w, b).is_ok());
        assert!(tape.dense(x2, x2, b).is_err());
    }

    #[test]
    fn batch_norm_cases() {
        let running = RunningStats::<f64>::new(1);
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(t(&[1], &[1.0]));
        let zero = tape.constant(t(&[1], &[0.0]));

        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.0).unwrap());
        let (y, m) = tape.batch_norm(x, one, zero, &running, Mode::Train).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(m.unwrap().mean, vec![3.0]);

        let x = tape.constant(t(&[2, 1, 1, 1], &[-1.0, 1.0]));
        let (y, _) = tape.batch_norm(x, one, zero, &running, Mode::Train).unwrap();
        let out = tape.value(y).unwrap().data();
        let expected = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((out[0] + expected).abs() < 1e-12 && (out[1] - expected).abs() < 1e-12);

        let beta = tape.constant(t(&[1], &[0.7]));
        let (y, _) = tape.batch_norm(x, zero, beta, &running, Mode::Train).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.7));

        // eval before any update uses mean 0, var 1
        let (y, m) = tape.batch_norm(x, one, zero, &running, Mode::Eval).unwrap();
        assert!(m.is_none());
        let out = tape.value(y).unwrap().data();
        assert!((out[1] - expected).abs() < 1e-12);

        let bad = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(tape.batch_norm(x, bad, zero, &running, Mode::Train).is_err());
    }

    #[test]
    fn running_stats_momentum() {
        let mut rs = RunningStats::<f64>::new(1);
        rs.absorb(&BatchMoments {
            mean: vec![2.0],
            var: vec![3.0],
        });
        assert!((rs.mean[0] - 0.2).abs() < 1e-12);
        assert!((rs.var[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn elementwise_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.5]);
        let zeros = tape.constant(Tensor::zeros(&[3]).unwrap());
        let a = tape.add(x, zeros).unwrap();
        assert_eq!(tape.value(a).unwrap().data(), tape.value(x).unwrap().data());
        assert!(tape.add(x, z).is_err());
        let big = tape.constant(t(&[2], &[-800.0, 800.0]));
        let s = tape.sigmoid(big).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn pooling_cases() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[1, 2, 3, 3], 1.5).unwrap());
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[1.5, 1.5]);
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[2.5]);
        let one = tape.constant(t(&[1, 1, 1, 1], &[7.0]));
        let p = tape.global_avg_pool(one).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[7.0]);
        let p = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[2.5]);
    }

    #[test]
    fn dropout_modes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[100_000]).unwrap());
        let e = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(e).unwrap(), tape.value(x).unwrap());
        let z = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(z).unwrap(), tape.value(x).unwrap());
        let d = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let vals = tape.value(d).unwrap().data();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn bce_cases() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t(&[1, 1], &[1.0]));
        let l = tape.bce_loss(p, &[1.0]).unwrap();
        assert!(tape.value(l).unwrap().data()[0] <= 1e-6);
        let p = tape.constant(t(&[2, 1], &[0.5, 0.5]));
        let l = tape.bce_loss(p, &[0.0, 1.0]).unwrap();
        assert!((tape.value(l).unwrap().data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let p = tape.constant(t(&[1, 1], &[0.0]));
        let l = tape.bce_loss(p, &[1.0]).unwrap();
        let v = tape.value(l).unwrap().data()[0];
        assert!((v - 16.118).abs() < 1e-3, "{v}");
        assert!((v + (1e-7f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn reverse_pass_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let z = tape.param(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.25]);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[2], &[3.0, 4.0]));
        let branch = tape.param(t(&[2], &[5.0, 6.0]));
        let killed = tape.scale(branch, 0.0).unwrap();
        let y = tape.add(x, killed).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(branch).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn loss_from_another_tape_is_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let xa = a.param(t(&[1], &[1.0]));
        let sa = a.sum(xa).unwrap();
        let xb = b.param(t(&[2], &[1.0, 1.0]));
        assert!(matches!(b.backward(sa), Err(Error::ForeignVar)));
        assert!(matches!(b.backward(xb), Err(Error::NonScalarLoss(_))));
    }
}
