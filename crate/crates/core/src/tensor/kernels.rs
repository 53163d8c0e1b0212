//! Forward/backward kernels operating on flat slices.

use super::{shape_err, Real, Result, Tensor};

/// `c = a · b` (or `c += a · b` when `accumulate`), where `a` is logically
/// `m×k` and `b` is `k×n`. `trans_a`/`trans_b` say the operand is stored
/// transposed (row-major `k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[R],
    b: &[R],
    c: &mut [R],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = R::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: the length assertion above covers every address the strided
    // views touch.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            R::one(),
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

/// Dense product of `[M,K]` and `[K,N]` tensors.
pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dims differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![R::zero(); m * n];
    gemm(false, false, m, n, k, a.data(), b.data(), &mut out, false);
    Tensor::new([m, n], out)
}

pub(crate) fn dims2<R: Real>(t: &Tensor<R>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(shape_err(op, format!("expected rank 2, got {s:?}"))),
    }
}

/// Stride/dilation/padding of a 2-D convolution (same for both axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            dilation,
            padding,
        }
    }

    /// `(size + 2p - d(k-1) - 1) / s + 1`, or `None` when not positive.
    pub fn out_dim(&self, size: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = size + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn new<R: Real>(
        x: &Tensor<R>,
        w: &Tensor<R>,
        b: &Tensor<R>,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let [n, c, h, wd] = x.shape() else {
            return Err(shape_err("conv2d", format!("input must be NCHW, got {:?}", x.shape())));
        };
        let [k, c2, kh, kw] = w.shape() else {
            return Err(shape_err("conv2d", format!("weight must be KCHW, got {:?}", w.shape())));
        };
        if c != c2 {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, weight expects {c2}"),
            ));
        }
        if b.shape() != [*k] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} != [{k}]", b.shape()),
            ));
        }
        if *kh == 0 || *kw == 0 || spec.dilation == 0 || spec.stride == 0 {
            return Err(shape_err("conv2d", "kernel, stride and dilation must be >= 1"));
        }
        let (Some(oh), Some(ow)) = (spec.out_dim(*h, *kh), spec.out_dim(*wd, *kw)) else {
            return Err(shape_err(
                "conv2d",
                format!("non-positive output for {h}x{wd} input, {kh}x{kw} kernel, {spec:?}"),
            ));
        };
        Ok(ConvGeom {
            n: *n,
            c: *c,
            h: *h,
            w: *wd,
            k: *k,
            kh: *kh,
            kw: *kw,
            oh,
            ow,
            spec,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C,H,W]` image into `[C*kh*kw, oh*ow]`.
fn im2col<R: Real>(x: &[R], g: &ConvGeom, cols: &mut [R]) {
    let ncols = g.col_cols();
    let s = g.spec;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * s.stride + i * s.dilation) as isize - s.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s.stride + j * s.dilation) as isize - s.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            R::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
fn col2im<R: Real>(cols: &[R], g: &ConvGeom, dx: &mut [R]) {
    let ncols = g.col_cols();
    let s = g.spec;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * s.stride + i * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * s.stride + j * s.dilation) as isize - s.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dilated cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]` plus bias.
pub fn conv2d<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    b: &Tensor<R>,
    spec: Conv2dSpec,
) -> Result<Tensor<R>> {
    let g = ConvGeom::new(x, w, b, spec)?;
    conv2d_forward(x.data(), w.data(), b.data(), &g)
}

pub(crate) fn conv2d_forward<R: Real>(
    x: &[R],
    w: &[R],
    b: &[R],
    g: &ConvGeom,
) -> Result<Tensor<R>> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![R::zero(); rows * ncols];
    let mut out = vec![R::zero(); g.n * g.k * ncols];
    let in_stride = g.c * g.h * g.w;
    for ni in 0..g.n {
        im2col(&x[ni * in_stride..(ni + 1) * in_stride], g, &mut cols);
        let dst = &mut out[ni * g.k * ncols..(ni + 1) * g.k * ncols];
        for (ki, chunk) in dst.chunks_mut(ncols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[ki]);
        }
        gemm(false, false, g.k, ncols, rows, w, &cols, dst, true);
    }
    Tensor::new([g.n, g.k, g.oh, g.ow], out)
}

/// Returns `(dx, dw, db)` for upstream gradient `dy`.
pub(crate) fn conv2d_backward<R: Real>(
    x: &[R],
    w: &[R],
    dy: &[R],
    g: &ConvGeom,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let mut cols = vec![R::zero(); rows * ncols];
    let mut dcols = vec![R::zero(); rows * ncols];
    let mut dx = vec![R::zero(); x.len()];
    let mut dw = vec![R::zero(); w.len()];
    let mut db = vec![R::zero(); g.k];
    for ni in 0..g.n {
        let dyn_ = &dy[ni * g.k * ncols..(ni + 1) * g.k * ncols];
        for (ki, chunk) in dyn_.chunks(ncols).enumerate() {
            db[ki] += chunk.iter().copied().sum::<R>();
        }
        im2col(&x[ni * in_stride..(ni + 1) * in_stride], g, &mut cols);
        // dW[K, rows] += dY[K, ncols] · cols^T
        gemm(false, true, g.k, rows, ncols, dyn_, &cols, &mut dw, true);
        // dcols[rows, ncols] = W^T · dY
        gemm(true, false, rows, ncols, g.k, w, dyn_, &mut dcols, false);
        col2im(&dcols, g, &mut dx[ni * in_stride..(ni + 1) * in_stride]);
    }
    (dx, dw, db)
}

/// Max pooling with square window `k` and stride `k` over `[N,C,H,W]`.
/// Returns the output and the flat argmax index per output element.
pub fn max_pool2d<R: Real>(x: &Tensor<R>, k: usize) -> Result<(Tensor<R>, Vec<usize>)> {
    let [n, c, h, w] = x.shape() else {
        return Err(shape_err("max_pool2d", format!("expected NCHW, got {:?}", x.shape())));
    };
    if k == 0 || *h < k || *w < k {
        return Err(shape_err("max_pool2d", format!("window {k} larger than {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([*n, *c, oh, ow], out)?, arg))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("softmax", "scalar input"))?;
    if n == 0 {
        return Err(shape_err("softmax", "empty last axis"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn transpose2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, n) = dims2(x, "transpose")?;
    let xd = x.data();
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat<R: Real>(parts: &[&Tensor<R>], axis: usize) -> Result<Tensor<R>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(shape_err("concat", format!("axis {axis} >= rank {rank}")));
    }
    for p in parts {
        let ok = p.ndim() == rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, out)
}
