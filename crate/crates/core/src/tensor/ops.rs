//! Forward operations and their vector-Jacobian products.
//!
//! Image tensors are NCHW. Two-dimensional tensors are `[rows, cols]`.

use super::conv::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    MatMul(Tensor, Tensor),
    AddBias(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    AvgPool2d {
        input: Tensor,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, f32),
    Sigmoid(Tensor),
    Softmax(Tensor),
    Concat(Vec<Tensor>),
    L1Mean(Tensor),
    Log(Tensor),
    MaxScalar(Tensor, f32),
    Clamp(Tensor, f32, f32),
    Bilinear(Tensor),
    Reshape(Tensor),
    Gather(Tensor, Vec<usize>),
    PairwiseDist(Tensor),
}

/// Floor on squared distances so the square root stays differentiable.
const DIST_EPS: f32 = 1e-12;
const DIST_FLOOR: f32 = 1.000_001e-6;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(
            op,
            format!("expected an NCHW tensor, got shape {:?}", t.shape()),
        )),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(
            op,
            format!("expected a 2-d tensor, got shape {:?}", t.shape()),
        )),
    }
}

fn flush_subnormal(v: f32) -> f32 {
    if v.abs() < f32::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Vec<f32> {
    t.data().iter().map(|&v| f(v)).collect()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    let (a, b) = (a.data(), b.data());
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(mismatch(op, self.shape(), other.shape()))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = zip_map(self, other, |a, b| a + b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = zip_map(self, other, |a, b| a - b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = zip_map(self, other, |a, b| a * b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor::from_op(map(self, |v| v * s), self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        Tensor::from_op(map(self, |v| v + s), self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::from_op(vec![s as f32], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let m = s / self.numel() as f64;
        Tensor::from_op(vec![m as f32], vec![1], Op::Mean(self.clone()))
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", other)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, &self.data(), false, &other.data(), false, &mut out, false);
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    /// Adds a length-`cols` bias to every row of a `[rows, cols]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, cols) = dims2("add_bias", self)?;
        if bias.shape() != [cols] {
            return Err(mismatch("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let data: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        drop(b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::AddBias(self.clone(), bias.clone())))
    }

    /// 2-d convolution (cross-correlation) with a square kernel.
    /// `weight` is `[out_c, in_c, k, k]`, `bias` is `[out_c]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (batch, in_c, in_h, in_w) = dims4("conv2d", self)?;
        let (out_c, w_in_c, kh, kw) = dims4("conv2d", weight)?;
        if w_in_c != in_c || kh != kw {
            return Err(mismatch("conv2d", self.shape(), weight.shape()));
        }
        if bias.shape() != [out_c] {
            return Err(mismatch("conv2d", weight.shape(), bias.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (Some(out_h), Some(out_w)) = (
            conv::conv_out_dim(in_h, kh, stride, pad),
            conv::conv_out_dim(in_w, kw, stride, pad),
        ) else {
            return Err(mismatch("conv2d", self.shape(), weight.shape()));
        };
        let geom = ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: kh,
            stride,
            pad,
            out_h,
            out_w,
        };
        let cols = conv::im2col(&self.data(), &geom);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut y = vec![0.0f32; out_c * cols_n];
        conv::gemm(out_c, rows, cols_n, &weight.data(), false, &cols, false, &mut y, false);
        // [out_c, N·P] -> [N, out_c, P] plus bias
        let plane = out_h * out_w;
        let mut out = vec![0.0f32; batch * out_c * plane];
        let b = bias.data();
        for oc in 0..out_c {
            for n in 0..batch {
                let src = &y[oc * cols_n + n * plane..][..plane];
                let dst = &mut out[(n * out_c + oc) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b[oc];
                }
            }
        }
        drop(b);
        let keep_cols = weight.requires_grad_flag();
        Ok(Tensor::from_op(
            out,
            vec![batch, out_c, out_h, out_w],
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                geom,
                cols: if keep_cols { cols } else { Vec::new() },
            },
        ))
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4("avg_pool2d", self)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("avg_pool2d", "kernel and stride must be positive"));
        }
        let (Some(oh), Some(ow)) = (
            conv::conv_out_dim(h, kernel, stride, 0),
            conv::conv_out_dim(w, kernel, stride, 0),
        ) else {
            return Err(mismatch("avg_pool2d", self.shape(), &[kernel, kernel]));
        };
        let x = self.data();
        let inv = 1.0 / (kernel * kernel) as f32;
        let mut out = vec![0.0f32; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x[p * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += src[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            Op::AvgPool2d {
                input: self.clone(),
                kernel,
                stride,
            },
        ))
    }

    /// `[N,C,H,W] -> [N,C]`, mean over spatial positions.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4("global_avg_pool", self)?;
        let plane = h * w;
        let out: Vec<f32> = self
            .data()
            .chunks_exact(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        Ok(Tensor::from_op(out, vec![n, c], Op::GlobalAvgPool(self.clone())))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(map(self, |v| v.max(0.0)), self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        Tensor::from_op(
            map(self, |v| if v > 0.0 { v } else { v * slope }),
            self.shape().to_vec(),
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    /// Logistic function. Saturated outputs and gradients that would be
    /// subnormal are flushed to zero; subnormal arithmetic is very slow on
    /// x86 and they carry no usable signal.
    pub fn sigmoid(&self) -> Tensor {
        let data = map(self, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                flush_subnormal(e / (1.0 + e))
            }
        });
        Tensor::from_op(data, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    /// Row-wise softmax of a `[rows, cols]` tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        let (_, cols) = dims2("softmax", self)?;
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v as f64;
            }
            let inv = (1.0 / total) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone())))
    }

    /// Concatenates along axis 1 (channels for NCHW, columns for 2-d).
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if rank < 2 {
            return Err(Error::invalid("concat", "inputs need at least two axes"));
        }
        let outer = first.shape()[0];
        let inner: usize = first.shape()[2..].iter().product();
        for p in &parts[1..] {
            let s = p.shape();
            if s.len() != rank || s[0] != outer || s[2..] != first.shape()[2..] {
                return Err(mismatch("concat", first.shape(), s));
            }
        }
        let channels: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut out = Vec::with_capacity(outer * channels * inner);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for n in 0..outer {
            for (p, g) in parts.iter().zip(&guards) {
                let len = p.shape()[1] * inner;
                out.extend_from_slice(&g[n * len..(n + 1) * len]);
            }
        }
        drop(guards);
        let mut shape = first.shape().to_vec();
        shape[1] = channels;
        Ok(Tensor::from_op(out, shape, Op::Concat(parts.to_vec())))
    }

    /// Mean absolute value; the subgradient at zero is zero.
    pub fn l1_mean(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v.abs() as f64).sum();
        let m = s / self.numel() as f64;
        Tensor::from_op(vec![m as f32], vec![1], Op::L1Mean(self.clone()))
    }

    /// Natural logarithm. Inputs must be positive.
    pub fn log(&self) -> Tensor {
        Tensor::from_op(map(self, f32::ln), self.shape().to_vec(), Op::Log(self.clone()))
    }

    /// `max(x, s)` elementwise; gradient flows only where `x > s`.
    pub fn max_with_scalar(&self, s: f32) -> Tensor {
        Tensor::from_op(map(self, |v| v.max(s)), self.shape().to_vec(), Op::MaxScalar(self.clone(), s))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        Tensor::from_op(
            map(self, |v| v.clamp(lo, hi)),
            self.shape().to_vec(),
            Op::Clamp(self.clone(), lo, hi),
        )
    }

    /// Bilinear resize of every NCHW plane (half-pixel centres, clamped
    /// edges).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4("bilinear_resize", self)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "output size must be positive"));
        }
        let out = conv::bilinear_forward(&self.data(), h, w, out_h, out_w);
        Ok(Tensor::from_op(out, vec![n, c, out_h, out_w], Op::Bilinear(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Picks flat elements by index into a 1-d tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if indices.is_empty() {
            return Err(Error::invalid("gather", "no indices"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {n} elements")));
        }
        let x = self.data();
        let out: Vec<f32> = indices.iter().map(|&i| x[i]).collect();
        drop(x);
        Ok(Tensor::from_op(out, vec![indices.len()], Op::Gather(self.clone(), indices.to_vec())))
    }

    /// Euclidean distances between all rows of a `[n, d]` tensor, as `[n, n]`.
    /// The diagonal is exactly zero and carries no gradient.
    pub fn pairwise_distances(&self) -> Result<Tensor> {
        let (n, d) = dims2("pairwise_distances", self)?;
        let x = self.data();
        let mut out = vec![0.0f32; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let sq: f32 = (0..d)
                    .map(|k| {
                        let diff = x[i * d + k] - x[j * d + k];
                        diff * diff
                    })
                    .sum();
                let dist = sq.max(DIST_EPS).sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        drop(x);
        Ok(Tensor::from_op(out, vec![n, n], Op::PairwiseDist(self.clone())))
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::L1Mean(..) => "l1_mean",
            Op::Log(..) => "log",
            Op::MaxScalar(..) => "max_with_scalar",
            Op::Clamp(..) => "clamp",
            Op::Bilinear(..) => "bilinear_resize",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::PairwiseDist(..) => "pairwise_distances",
        }
    }

    pub fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                vec![a, b]
            }
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![input, weight, bias],
            Op::Concat(parts) => parts.iter().collect(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::AvgPool2d { input: a, .. }
            | Op::GlobalAvgPool(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::L1Mean(a)
            | Op::Log(a)
            | Op::MaxScalar(a, _)
            | Op::Clamp(a, _, _)
            | Op::Bilinear(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::PairwiseDist(a) => vec![a],
        }
    }

    /// Gradients with respect to each input that requires one.
    pub fn backward(&self, out: &Tensor, g: &[f32]) -> Vec<(Tensor, Vec<f32>)> {
        let mut grads = Vec::new();
        let want = |t: &Tensor| t.requires_grad_flag();
        match self {
            Op::Add(a, b) => {
                for t in [a, b] {
                    if want(t) {
                        grads.push((t.clone(), g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    grads.push((a.clone(), g.to_vec()));
                }
                if want(b) {
                    grads.push((b.clone(), g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let bd = b.data();
                    grads.push((a.clone(), g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect()));
                }
                if want(b) {
                    let ad = a.data();
                    grads.push((b.clone(), g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, s) => grads.push((a.clone(), g.iter().map(|v| v * s).collect())),
            Op::AddScalar(a) => grads.push((a.clone(), g.to_vec())),
            Op::Sum(a) => grads.push((a.clone(), vec![g[0]; a.numel()])),
            Op::Mean(a) => grads.push((a.clone(), vec![g[0] / a.numel() as f32; a.numel()])),
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if want(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    conv::gemm(m, n, k, g, false, &b.data(), true, &mut da, false);
                    grads.push((a.clone(), da));
                }
                if want(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    conv::gemm(k, m, n, &a.data(), true, g, false, &mut db, false);
                    grads.push((b.clone(), db));
                }
            }
            Op::AddBias(x, bias) => {
                if want(x) {
                    grads.push((x.clone(), g.to_vec()));
                }
                if want(bias) {
                    let cols = bias.numel();
                    let mut db = vec![0.0f32; cols];
                    for row in g.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    grads.push((bias.clone(), db));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => conv_backward(input, weight, bias, geom, cols, g, &mut grads),
            Op::AvgPool2d {
                input,
                kernel,
                stride,
            } => {
                let [n, c, h, w] = input.shape()[..] else { unreachable!() };
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let inv = 1.0 / (kernel * kernel) as f32;
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = g[(p * oh + oy) * ow + ox] * inv;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    dx[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += v;
                                }
                            }
                        }
                    }
                }
                grads.push((input.clone(), dx));
            }
            Op::GlobalAvgPool(a) => {
                let plane = a.shape()[2] * a.shape()[3];
                let inv = 1.0 / plane as f32;
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                grads.push((a.clone(), dx));
            }
            Op::Relu(a) => {
                let x = a.data();
                grads.push((
                    a.clone(),
                    g.iter().zip(x.iter()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            Op::LeakyRelu(a, slope) => {
                let x = a.data();
                grads.push((
                    a.clone(),
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect(),
                ));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                grads.push((
                    a.clone(),
                    g.iter().zip(y.iter()).map(|(g, y)| flush_subnormal(g * y * (1.0 - y))).collect(),
                ));
            }
            Op::Softmax(a) => {
                let cols = a.shape()[1];
                let y = out.data();
                let mut dx = vec![0.0f32; y.len()];
                for ((dx, y), g) in dx.chunks_exact_mut(cols).zip(y.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                    let dot: f32 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for i in 0..cols {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                grads.push((a.clone(), dx));
            }
            Op::Concat(parts) => {
                let outer = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let total = out.shape()[1] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[1] * inner;
                    if want(p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for n in 0..outer {
                            dp.extend_from_slice(&g[n * total + offset..][..len]);
                        }
                        grads.push((p.clone(), dp));
                    }
                    offset += len;
                }
            }
            Op::L1Mean(a) => {
                let scale = g[0] / a.numel() as f32;
                grads.push((
                    a.clone(),
                    map(a, |v| {
                        if v > 0.0 {
                            scale
                        } else if v < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    }),
                ));
            }
            Op::Log(a) => {
                let x = a.data();
                grads.push((a.clone(), g.iter().zip(x.iter()).map(|(g, x)| g / x).collect()));
            }
            Op::MaxScalar(a, s) => {
                let x = a.data();
                grads.push((
                    a.clone(),
                    g.iter().zip(x.iter()).map(|(g, &x)| if x > *s { *g } else { 0.0 }).collect(),
                ));
            }
            Op::Clamp(a, lo, hi) => {
                let x = a.data();
                grads.push((
                    a.clone(),
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Bilinear(a) => {
                let (h, w) = (a.shape()[2], a.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                grads.push((a.clone(), conv::bilinear_backward(g, h, w, oh, ow)));
            }
            Op::Reshape(a) => grads.push((a.clone(), g.to_vec())),
            Op::Gather(a, indices) => {
                let mut dx = vec![0.0f32; a.numel()];
                for (&i, &v) in indices.iter().zip(g) {
                    dx[i] += v;
                }
                grads.push((a.clone(), dx));
            }
            Op::PairwiseDist(a) => {
                let (n, d) = (a.shape()[0], a.shape()[1]);
                let x = a.data();
                let dist = out.data();
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let dij = dist[i * n + j];
                        // sqrt(max(sq, eps)) is flat below the floor
                        if dij <= DIST_FLOOR {
                            continue;
                        }
                        let coeff = (g[i * n + j] + g[j * n + i]) / dij;
                        if coeff == 0.0 || j < i {
                            continue;
                        }
                        for k in 0..d {
                            let diff = x[i * d + k] - x[j * d + k];
                            dx[i * d + k] += coeff * diff;
                            dx[j * d + k] -= coeff * diff;
                        }
                    }
                }
                grads.push((a.clone(), dx));
            }
        }
        grads
    }
}

fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    geom: &ConvGeom,
    cols: &[f32],
    g: &[f32],
    grads: &mut Vec<(Tensor, Vec<f32>)>,
) {
    let plane = geom.out_h * geom.out_w;
    let cols_n = geom.col_cols();
    let rows = geom.col_rows();
    // [N, out_c, P] -> [out_c, N·P]
    let mut gy = vec![0.0f32; geom.out_c * cols_n];
    for n in 0..geom.batch {
        for oc in 0..geom.out_c {
            gy[oc * cols_n + n * plane..][..plane]
                .copy_from_slice(&g[(n * geom.out_c + oc) * plane..][..plane]);
        }
    }
    if bias.requires_grad_flag() {
        let db = gy
            .chunks_exact(cols_n)
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        grads.push((bias.clone(), db));
    }
    if weight.requires_grad_flag() {
        let mut dw = vec![0.0f32; geom.out_c * rows];
        conv::gemm(geom.out_c, cols_n, rows, &gy, false, cols, true, &mut dw, false);
        grads.push((weight.clone(), dw));
    }
    if input.requires_grad_flag() {
        let mut dcols = vec![0.0f32; rows * cols_n];
        conv::gemm(rows, geom.out_c, cols_n, &weight.data(), true, &gy, false, &mut dcols, false);
        grads.push((input.clone(), conv::col2im(&dcols, geom)));
    }
}
