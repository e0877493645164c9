//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in the order it was applied, which is already a
//! topological order. [`Graph::backward`] walks the tape in reverse, so each
//! node's gradient is complete before it is propagated to its inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    #[default]
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Exponential moving averages kept by a batch-norm layer for eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = keep * *r + take * b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", "input rank", format!("expected [N,C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape("conv2d", "kernel rank", format!("expected [O,C,kh,kw], got {kernel:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c != kc {
            return Err(Error::shape(
                "conv2d",
                "input axis 1 vs kernel axis 1",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        "conv2d",
                        "input axes 2,3 vs kernel axes 2,3",
                        format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let ph = ((ho - 1) * stride + kh).saturating_sub(h);
                let pw = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, ph / 2, pw / 2)
            }
        };
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.out_pixels();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad_top as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad_left as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.out_pixels();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Square(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Reshape(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Values are immutable once pushed.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[O,C,kh,kw]` kernels plus a
    /// per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if self.shape(bias) != [geom.o] {
            return Err(Error::shape(
                "conv2d",
                "bias axis 0 vs kernel axis 0",
                format!("bias {:?} for {} output channels", self.shape(bias), geom.o),
            ));
        }
        let p = geom.out_pixels();
        let ckk = geom.patch_len();
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); geom.n * geom.o * p];
        let mut cols = vec![T::zero(); ckk * p];
        let in_stride = geom.c * geom.h * geom.w;
        for n in 0..geom.n {
            geom.im2col(&x[n * in_stride..(n + 1) * in_stride], &mut cols);
            let dst = &mut out[n * geom.o * p..(n + 1) * geom.o * p];
            T::gemm(geom.o, ckk, p, T::one(), k, false, &cols, false, T::zero(), dst);
            for (o, row) in dst.chunks_mut(p).enumerate() {
                for v in row {
                    *v = *v + b[o];
                }
            }
        }
        let value = Tensor::new([geom.n, geom.o, geom.ho, geom.wo], out)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping `window x window` max pooling. Ties go to the first
    /// element in row-major window order.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("maxpool2d", "input rank", format!("expected [N,C,H,W], got {shape:?}")));
        }
        if window == 0 {
            return Err(Error::InvalidArgument("maxpool2d: window must be positive".into()));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                "input axes 2,3",
                format!("spatial extent {h}x{w} not divisible by window {window}"),
            ));
        }
        let (ho, wo) = (h / window, w / window);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = base + oy * window * w + ox * window;
                    let mut best = x[best_idx];
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (oy * window + i) * w + ox * window + j;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Batch normalization over the `(N, H, W)` axes of a `[N,C,H,W]` input.
    ///
    /// With `running == None` the batch's own statistics are used and
    /// returned; otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm_with(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batchnorm", "input rank", format!("expected [N,C,H,W], got {shape:?}")));
        }
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument("batchnorm: eps must be positive".into()));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for (name, var) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(var) != [c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} axis 0 vs input axis 1"),
                    format!("{name} {:?} for {c} channels", self.shape(var)),
                ));
            }
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batchnorm", "running stats axis 0", format!("expected {c} channels")));
            }
        }
        let hw = h * w;
        let count = T::from_usize(n * hw).expect("count");
        let x = self.value(input).data();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        s = s + x[off..off + hw].iter().copied().sum::<T>();
                    }
                    let mu = s / count;
                    let mut ss = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        ss = ss + x[off..off + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(&[input, gamma, beta]);
        let batch_stats = running.is_none();
        let var_node = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((var_node, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// Batch normalization that owns its running statistics: train mode
    /// normalizes with batch statistics and folds them into `running`; eval
    /// mode normalizes with `running`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        momentum: T,
        mode: Mode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (out, stats) = self.batch_norm_with(input, gamma, beta, eps, None)?;
                running.update(stats.as_ref().expect("train mode yields stats"), momentum);
                Ok(out)
            }
            Mode::Eval => {
                let (out, _) =
                    self.batch_norm_with(input, gamma, beta, eps, Some((running.mean.data(), running.var.data())))?;
                Ok(out)
            }
        }
    }

    /// `x · W + b` for `x: [N,F]`, `W: [F,G]`, `b: [G]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("dense", "rank", format!("input {xs:?}, weight {ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(Error::shape(
                "dense",
                "input axis 1 vs weight axis 0",
                format!("{} features into weight expecting {}", xs[1], ws[0]),
            ));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(Error::shape(
                "dense",
                "bias axis 0 vs weight axis 1",
                format!("bias {:?} for {} outputs", self.shape(bias), ws[1]),
            ));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        T::gemm(n, f, g, T::one(), self.value(input).data(), false, self.value(weight).data(), false, T::one(), &mut out);
        let value = Tensor::new([n, g], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// Inverted dropout. Eval mode returns `input` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, "all axes", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Natural log; requires strictly positive input.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::InvalidArgument("log of a nonpositive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), |x| x.ln()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::from_usize(t.len()).expect("len"));
        let rg = self.needs(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares());
        let rg = self.needs(&[a]);
        self.push(value, Op::SumSquares(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Gradients of the scalar `loss` with respect to every node recorded
    /// before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, contribution: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn like(&self, var: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(var).to_vec(), data).expect("gradient matches value shape")
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let p = geom.out_pixels();
                let ckk = geom.patch_len();
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let want_x = self.nodes[input.0].requires_grad;
                let want_k = self.nodes[kernel.0].requires_grad;
                let in_stride = geom.c * geom.h * geom.w;
                let mut dk = vec![T::zero(); k.len()];
                let mut dx = vec![T::zero(); if want_x { x.len() } else { 0 }];
                let mut cols = vec![T::zero(); ckk * p];
                let mut dcols = vec![T::zero(); if want_x { ckk * p } else { 0 }];
                for n in 0..geom.n {
                    let dy = &gd[n * geom.o * p..(n + 1) * geom.o * p];
                    if want_k {
                        geom.im2col(&x[n * in_stride..(n + 1) * in_stride], &mut cols);
                        T::gemm(geom.o, p, ckk, T::one(), dy, false, &cols, true, T::one(), &mut dk);
                    }
                    if want_x {
                        T::gemm(ckk, geom.o, p, T::one(), k, true, dy, false, T::zero(), &mut dcols);
                        geom.col2im(&dcols, &mut dx[n * in_stride..(n + 1) * in_stride]);
                    }
                }
                let mut db = vec![T::zero(); geom.o];
                for n in 0..geom.n {
                    for (o, slot) in db.iter_mut().enumerate() {
                        let off = (n * geom.o + o) * p;
                        *slot = *slot + gd[off..off + p].iter().copied().sum::<T>();
                    }
                }
                if want_x {
                    let t = self.like(*input, dx);
                    self.accumulate(grads, *input, t);
                }
                if want_k {
                    let t = self.like(*kernel, dk);
                    self.accumulate(grads, *kernel, t);
                }
                let t = self.like(*bias, db);
                self.accumulate(grads, *bias, t);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    dx[idx] = dx[idx] + gv;
                }
                let t = self.like(*input, dx);
                self.accumulate(grads, *input, t);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for idx in off..off + hw {
                            dgamma[ch] = dgamma[ch] + gd[idx] * xhat[idx];
                            dbeta[ch] = dbeta[ch] + gd[idx];
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![T::zero(); gd.len()];
                    let count = T::from_usize(n * hw).expect("count");
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        // dxhat = g * gamma; sums over the batch reuse dbeta/dgamma.
                        let sum_dxhat = dbeta[ch] * gam[ch];
                        let sum_dxhat_xhat = dgamma[ch] * gam[ch];
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for idx in off..off + hw {
                                dx[idx] = if *batch_stats {
                                    inv_std[ch] / count
                                        * (count * gd[idx] * gam[ch] - sum_dxhat - xhat[idx] * sum_dxhat_xhat)
                                } else {
                                    gd[idx] * scale
                                };
                            }
                        }
                    }
                    let t = self.like(*input, dx);
                    self.accumulate(grads, *input, t);
                }
                let t = self.like(*gamma, dgamma);
                self.accumulate(grads, *gamma, t);
                let t = self.like(*beta, dbeta);
                self.accumulate(grads, *beta, t);
            }
            Op::Dense { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, f) = (xs[0], xs[1]);
                let g_out = self.shape(*weight)[1];
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, g_out, f, T::one(), gd, false, self.value(*weight).data(), true, T::zero(), &mut dx);
                    let t = self.like(*input, dx);
                    self.accumulate(grads, *input, t);
                }
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![T::zero(); f * g_out];
                    T::gemm(f, n, g_out, T::one(), self.value(*input).data(), true, gd, false, T::zero(), &mut dw);
                    let t = self.like(*weight, dw);
                    self.accumulate(grads, *weight, t);
                }
                let mut db = vec![T::zero(); g_out];
                for row in gd.chunks(g_out) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                let t = self.like(*bias, db);
                self.accumulate(grads, *bias, t);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                let t = self.like(*a, dx);
                self.accumulate(grads, *a, t);
            }
            Op::Dropout { input, mask } => {
                let dx = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                let t = self.like(*input, dx);
                self.accumulate(grads, *input, t);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = gd.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                let db = gd.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                let ta = self.like(*a, da);
                let tb = self.like(*b, db);
                self.accumulate(grads, *a, ta);
                self.accumulate(grads, *b, tb);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = self.like(*a, gd.to_vec());
                self.accumulate(grads, *a, t);
            }
            Op::Scale(a, c) => {
                let t = self.like(*a, gd.iter().map(|&v| v * *c).collect());
                self.accumulate(grads, *a, t);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::lit(2.0);
                let t = self.like(*a, x.iter().zip(gd).map(|(&v, &gv)| two * v * gv).collect());
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let t = self.like(*a, y.iter().zip(gd).map(|(&v, &gv)| v * gv).collect());
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let t = self.like(*a, x.iter().zip(gd).map(|(&v, &gv)| gv / v).collect());
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a).to_vec(), gd[0]);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let len = T::from_usize(self.value(*a).len()).expect("len");
                let t = Tensor::full(self.shape(*a).to_vec(), gd[0] / len);
                self.accumulate(grads, *a, t);
            }
            Op::SumSquares(a) => {
                let two = T::lit(2.0);
                let t = self.value(*a).map(|v| two * v * gd[0]);
                self.accumulate(grads, *a, t);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`. Always `Some` for
    /// differentiable leaves; `None` for nodes the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}
