//! Dense kernels: GEMM wrapper, im2col/col2im and bilinear sampling weights.

/// `c = a · b (+ c if accumulate)` where `a` is logically `m×k` and `b` is
/// logically `k×n`. `a_t`/`b_t` say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index touched by the strides
    // lies inside the slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Unfolds an NCHW batch into a `(C·k·k) × (N·OH·OW)` column matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols_n = g.col_cols();
    let plane = g.out_h * g.out_w;
    let mut cols = vec![0.0f32; g.col_rows() * cols_n];
    for c in 0..g.in_c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols_n = g.col_cols();
    let plane = g.out_h * g.out_w;
    let mut x = vec![0.0f32; g.batch * g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst_row[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// One output coordinate of a bilinear resize: the two source
/// taps and the weight of the upper one.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f32,
}

/// Half-pixel-centred sampling grid with edge clamping: output pixel `o`
/// samples input coordinate `(o + 0.5) * in / out - 0.5`. For integer
/// up-sampling factors every input pixel receives total weight equal to the
/// factor, so the resize preserves the mean.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: (pos - lo as f64) as f32,
            }
        })
        .collect()
}

/// Resizes every `h×w` plane in `planes` to `out_h×out_w`.
pub(crate) fn bilinear_forward(
    planes: &[f32],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let count = planes.len() / (h * w);
    let mut out = vec![0.0f32; count * out_h * out_w];
    for p in 0..count {
        let src = &planes[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let top = src[y.lo * w + x.lo] * (1.0 - x.frac) + src[y.lo * w + x.hi] * x.frac;
                let bottom = src[y.hi * w + x.lo] * (1.0 - x.frac) + src[y.hi * w + x.hi] * x.frac;
                dst[oy * out_w + ox] = top * (1.0 - y.frac) + bottom * y.frac;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad: &[f32],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let count = grad.len() / (out_h * out_w);
    let mut out = vec![0.0f32; count * h * w];
    for p in 0..count {
        let src = &grad[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                let gt = g * (1.0 - y.frac);
                let gb = g * y.frac;
                dst[y.lo * w + x.lo] += gt * (1.0 - x.frac);
                dst[y.lo * w + x.hi] += gt * x.frac;
                dst[y.hi * w + x.lo] += gb * (1.0 - x.frac);
                dst[y.hi * w + x.hi] += gb * x.frac;
            }
        }
    }
    out
}
