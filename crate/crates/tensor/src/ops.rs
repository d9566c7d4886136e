use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{col2im_add, gemm_acc, im2col, pool_extent, transpose, ConvGeom};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn sum_f64<T: Real>(values: impl Iterator<Item = T>) -> f64 {
    values.fold(0.0, |acc, v| acc + v.as_f64())
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(TensorError::InvalidShape {
                op,
                shape: self.shape(v).to_vec(),
                reason: format!("expected rank {rank}"),
            });
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, v: Var) -> Result<()> {
        if self.value(v).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op,
                shape: self.shape(v).to_vec(),
                reason: "expected a single-element tensor".into(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, op)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a per-channel bias `[C]` to `x` of shape `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let channels = shape[1];
        let inner = numel(&shape[2..]);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias { x, bias }))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, Op::Affine { x, scale }, |v| v * scale + shift)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.affine(x, factor, T::zero())
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_scalar("mul_scalar", s)?;
        let sv = self.value(s).data()[0];
        Ok(self.unary(x, Op::MulScalar { x, s }, |v| v * sv))
    }

    /// Divides `x` by the single-element tensor `s`. A zero divisor yields an
    /// all-zero output with zero gradients (the 0/0 guard used by weight
    /// normalization of an all-zero tensor).
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_scalar("div_scalar", s)?;
        let sv = self.value(s).data()[0];
        if sv == T::zero() {
            return Ok(self.unary(x, Op::DivScalar { x, s }, |_| T::zero()));
        }
        Ok(self.unary(x, Op::DivScalar { x, s }, |v| v / sv))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let span = (size + 2 * padding) as isize - k as isize;
            if span < 0 {
                return Err(TensorError::EmptyOutput {
                    op: "conv2d",
                    shape: sx.to_vec(),
                    dim: span / stride as isize,
                });
            }
            Ok(span as usize / stride + 1)
        };
        Ok(ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            out_h: out(sx[2], sw[2])?,
            out_w: out(sx[3], sw[3])?,
        })
    }

    /// 2-D cross-correlation of `x: [N,C,H,W]` with `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, padding)?;
        let batch = self.shape(x)[0];
        let filters = self.shape(w)[0];
        let (patch, pos) = (geom.patch(), geom.positions());
        let image = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); batch * filters * pos];
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            for n in 0..batch {
                let cols = im2col(&xv[n * image..(n + 1) * image], &geom);
                let dst = &mut out[n * filters * pos..(n + 1) * filters * pos];
                gemm_acc(filters, patch, pos, wv, &cols, dst);
            }
        }
        let shape = vec![batch, filters, geom.out_h, geom.out_w];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
        ))
    }

    /// Max pooling over `x: [N,C,H,W]`. With `ceil_mode` a trailing partial
    /// window is kept, so spatial sizes shrink to at least 1 instead of failing.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    ) -> Result<Var> {
        self.expect_rank("max_pool2d", x, 4)?;
        let s = self.shape(x).to_vec();
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                reason: "kernel and stride must be positive".into(),
            });
        }
        let extent = |size| {
            pool_extent(size, kernel, stride, ceil_mode).ok_or(TensorError::EmptyOutput {
                op: "max_pool2d",
                shape: s.clone(),
                dim: (size as isize - kernel as isize) / stride as isize + 1,
            })
        };
        let (oh, ow) = (extent(s[2])?, extent(s[3])?);
        let (h, w) = (s[2], s[3]);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for plane in 0..planes {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    let mut best = base + y0 * w + x0;
                    for yy in y0..(y0 + kernel).min(h) {
                        for xx in x0..(x0 + kernel).min(w) {
                            let i = base + yy * w + xx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            Op::Relu(x),
            |v| if v > T::zero() { v } else { T::zero() },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero at and beyond both edges.
    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clip { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = sum_f64(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(T::of(total)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = sum_f64(v.data().iter().copied()) / v.numel() as f64;
        self.push(Tensor::scalar(T::of(mean)), Op::Mean(x))
    }

    /// Largest element; the gradient flows to its first occurrence.
    pub fn max_all(&mut self, x: Var) -> Var {
        let data = self.value(x).data();
        let mut index = 0;
        for (i, v) in data.iter().enumerate() {
            if *v > data[index] {
                index = i;
            }
        }
        let best = data[index];
        self.push(Tensor::scalar(best), Op::MaxAll { x, index })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("softmax", &shape, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| xv[at(j)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = (0..len).map(|j| (xv[at(j)].as_f64() - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    out[at(j)] = T::of(e / total);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("log_softmax", &shape, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| xv[at(j)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..len).map(|j| (xv[at(j)].as_f64() - max).exp()).sum();
                let lse = max + total.ln();
                for j in 0..len {
                    out[at(j)] = T::of(xv[at(j)].as_f64() - lse);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x, axis }))
    }

    /// Batch normalization that always uses the statistics of the current
    /// batch (population variance over batch and spatial positions), followed
    /// by the learnable per-channel scale `gamma` and shift `beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "batch_norm",
                shape,
                reason: "expected [N,C] or [N,C,H,W]".into(),
            });
        }
        let channels = shape[1];
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (batch, inner) = (shape[0], numel(&shape[2..]));
        let count = (batch * inner) as f64;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(channels);
        for c in 0..channels {
            let idx = |n: usize, k: usize| (n * channels + c) * inner + k;
            let mut total = 0.0;
            for n in 0..batch {
                for k in 0..inner {
                    total += xv[idx(n, k)].as_f64();
                }
            }
            let mean = total / count;
            let mut sq = 0.0;
            for n in 0..batch {
                for k in 0..inner {
                    let d = xv[idx(n, k)].as_f64() - mean;
                    sq += d * d;
                }
            }
            let istd = 1.0 / (sq / count + eps).sqrt();
            inv_std.push(istd);
            let (gc, bc) = (gv[c].as_f64(), bv[c].as_f64());
            for n in 0..batch {
                for k in 0..inner {
                    let i = idx(n, k);
                    let h = (xv[i].as_f64() - mean) * istd;
                    xhat[i] = T::of(h);
                    out[i] = T::of(gc * h + bc);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Pairwise squared Euclidean distances between rows of `a: [n,d]` and
    /// `b: [m,d]`, giving `[n,m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "sq_dist",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &bv[j * d..(j + 1) * d];
                let total: f64 = ra
                    .iter()
                    .zip(rb)
                    .map(|(x, y)| {
                        let diff = x.as_f64() - y.as_f64();
                        diff * diff
                    })
                    .sum();
                out.push(T::of(total));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::SqDist(a, b)))
    }

    /// Selects `x[i, indices[i]]` from `x: [n, c]`, giving `[n]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.expect_rank("pick", x, 2)?;
        let (n, c) = (self.shape(x)[0], self.shape(x)[1]);
        if indices.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: vec![n, c],
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index: bad,
                bound: c,
            });
        }
        let xv = self.value(x).data();
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &k)| xv[r * c + k])
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = s.first().copied().unwrap_or(1);
        let rest = numel(s) / lead;
        self.reshape(x, &[lead, rest])
    }

    /// Uniform rounding onto `{i/levels}` with a straight-through gradient.
    /// Ties round half away from zero.
    pub fn round_ste(&mut self, x: Var, levels: u32) -> Var {
        let n = T::of(levels as f64);
        self.unary(x, Op::RoundSte(x), |v| (v * n).round() / n)
    }

    /// `sign(x)` with `sign(0) = +1` and a straight-through gradient.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        self.unary(x, Op::SignSte(x), |v| {
            if v < T::zero() {
                -T::one()
            } else {
                T::one()
            }
        })
    }

    /// Mean negative log-likelihood of integer `labels` under `logits: [n, c]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.expect_rank("cross_entropy", logits, 2)?;
        let logp = self.log_softmax(logits, 1)?;
        let picked = self.pick(logp, labels)?;
        let mean = self.mean(picked);
        Ok(self.neg(mean))
    }

    /// Input gradients of node `idx` given its output gradient `g`; inputs
    /// that do not require gradients are skipped.
    pub(crate) fn vjp(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&gv, &y)| gv * y).collect()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::AddBias { x, bias } => {
                if needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if needs(*bias) {
                    let shape = node.value.shape();
                    let (channels, inner) = (shape[1], numel(&shape[2..]));
                    let mut acc = vec![0.0f64; channels];
                    for (i, gv) in g.iter().enumerate() {
                        acc[(i / inner) % channels] += gv.as_f64();
                    }
                    out.push((*bias, acc.into_iter().map(T::of).collect()));
                }
            }
            Op::Affine { x, scale } => {
                if needs(*x) {
                    out.push((*x, g.iter().map(|&v| v * *scale).collect()));
                }
            }
            Op::MulScalar { x, s } => {
                let sv = val(*s)[0];
                if needs(*x) {
                    out.push((*x, g.iter().map(|&v| v * sv).collect()));
                }
                if needs(*s) {
                    let total = sum_f64(g.iter().zip(val(*x)).map(|(&gv, &xv)| gv * xv));
                    out.push((*s, vec![T::of(total)]));
                }
            }
            Op::DivScalar { x, s } => {
                let sv = val(*s)[0];
                if sv == T::zero() {
                    if needs(*x) {
                        out.push((*x, vec![T::zero(); g.len()]));
                    }
                    if needs(*s) {
                        out.push((*s, vec![T::zero()]));
                    }
                } else {
                    if needs(*x) {
                        out.push((*x, g.iter().map(|&v| v / sv).collect()));
                    }
                    if needs(*s) {
                        let y = node.value.data();
                        let total = sum_f64(g.iter().zip(y).map(|(&gv, &yv)| gv * yv));
                        out.push((*s, vec![T::of(-total / sv.as_f64())]));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let bt = transpose(k, n, val(*b));
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(m, n, k, g, &bt, &mut da);
                    out.push((*a, da));
                }
                if needs(*b) {
                    let at = transpose(m, k, val(*a));
                    let mut db = vec![T::zero(); k * n];
                    gemm_acc(k, m, n, &at, g, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let geom = self.conv_geom(*x, *w, *stride, *padding)?;
                let batch = self.shape(*x)[0];
                let filters = self.shape(*w)[0];
                let (patch, pos) = (geom.patch(), geom.positions());
                let image = geom.channels * geom.height * geom.width;
                let (xv, wv) = (val(*x), val(*w));
                if needs(*w) {
                    let mut dw = vec![T::zero(); filters * patch];
                    for n in 0..batch {
                        let cols = im2col(&xv[n * image..(n + 1) * image], &geom);
                        let cols_t = transpose(patch, pos, &cols);
                        let gn = &g[n * filters * pos..(n + 1) * filters * pos];
                        gemm_acc(filters, pos, patch, gn, &cols_t, &mut dw);
                    }
                    out.push((*w, dw));
                }
                if needs(*x) {
                    let wt = transpose(filters, patch, wv);
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dcols = vec![T::zero(); patch * pos];
                    for n in 0..batch {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        let gn = &g[n * filters * pos..(n + 1) * filters * pos];
                        gemm_acc(patch, filters, pos, &wt, gn, &mut dcols);
                        col2im_add(&dcols, &geom, &mut dx[n * image..(n + 1) * image]);
                    }
                    out.push((*x, dx));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if needs(*x) {
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                    out.push((*x, dx));
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Tanh(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    out.push((
                        *x,
                        g.iter()
                            .zip(y)
                            .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                            .collect(),
                    ));
                }
            }
            Op::Abs(x) => {
                if needs(*x) {
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Clip { x, lo, hi } => {
                if needs(*x) {
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { T::zero() })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    out.push((*x, vec![g[0]; val(*x).len()]));
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = val(*x).len();
                    out.push((*x, vec![g[0] / T::of(n as f64); n]));
                }
            }
            Op::MaxAll { x, index } => {
                if needs(*x) {
                    let mut dx = vec![T::zero(); val(*x).len()];
                    dx[*index] = g[0];
                    out.push((*x, dx));
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let (outer, len, inner) = axis_split("softmax", node.value.shape(), *axis)?;
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len)
                                .map(|j| g[at(j)].as_f64() * y[at(j)].as_f64())
                                .sum();
                            for j in 0..len {
                                let k = at(j);
                                dx[k] = T::of(y[k].as_f64() * (g[k].as_f64() - dot));
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::LogSoftmax { x, axis } => {
                if needs(*x) {
                    let (outer, len, inner) = axis_split("log_softmax", node.value.shape(), *axis)?;
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let total: f64 = (0..len).map(|j| g[at(j)].as_f64()).sum();
                            for j in 0..len {
                                let k = at(j);
                                dx[k] = T::of(g[k].as_f64() - y[k].as_f64().exp() * total);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let (batch, channels, inner) = (shape[0], shape[1], numel(&shape[2..]));
                let count = (batch * inner) as f64;
                let gv = val(*gamma);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for c in 0..channels {
                    let idx = |n: usize, k: usize| (n * channels + c) * inner + k;
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for n in 0..batch {
                        for k in 0..inner {
                            let i = idx(n, k);
                            sum_g += g[i].as_f64();
                            sum_gx += g[i].as_f64() * xhat[i].as_f64();
                        }
                    }
                    dgamma[c] = T::of(sum_gx);
                    dbeta[c] = T::of(sum_g);
                    let coef = gv[c].as_f64() * inv_std[c] / count;
                    for n in 0..batch {
                        for k in 0..inner {
                            let i = idx(n, k);
                            let v = count * g[i].as_f64() - sum_g - xhat[i].as_f64() * sum_gx;
                            dx[i] = T::of(coef * v);
                        }
                    }
                }
                if needs(*x) {
                    out.push((*x, dx));
                }
                if needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::SqDist(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0f64; n * d];
                let mut db = vec![0.0f64; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j].as_f64();
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff =
                                2.0 * gij * (av[i * d + k].as_f64() - bv[j * d + k].as_f64());
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                if needs(*a) {
                    out.push((*a, da.into_iter().map(T::of).collect()));
                }
                if needs(*b) {
                    out.push((*b, db.into_iter().map(T::of).collect()));
                }
            }
            Op::Pick { x, indices } => {
                if needs(*x) {
                    let c = self.shape(*x)[1];
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (r, (&k, &gv)) in indices.iter().zip(g).enumerate() {
                        dx[r * c + k] = gv;
                    }
                    out.push((*x, dx));
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let mut dx = vec![T::zero(); val(*x).len()];
                    let offset = start * (g.len() / node.value.shape()[0]);
                    dx[offset..offset + g.len()].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
            Op::Reshape(x) | Op::RoundSte(x) | Op::SignSte(x) => {
                if needs(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
        }
        Ok(out)
    }
}
