//! Raw numeric kernels shared by the tape's forward and adjoint passes.

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Stride, zero padding and dilation of a 2-D convolution (same on both axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, padding that keeps the spatial size for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when the dilated
    /// kernel does not fit.
    pub fn out_size(&self, n: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

#[allow(clippy::needless_range_loop)]
fn im2col<T: Float>(x: &[T], d: &ConvDims, g: ConvGeom, cols: &mut [T]) {
    let p = d.oh * d.ow;
    let pad = g.padding as isize;
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        out_row[ox] = if ix < 0 || ix >= d.w as isize {
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

fn col2im<T: Float>(cols: &[T], d: &ConvDims, g: ConvGeom, dx: &mut [T]) {
    let p = d.oh * d.ow;
    let pad = g.padding as isize;
    for c in 0..d.c_in {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            plane[base + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_output_shape(x: Shape, w: Shape, g: ConvGeom) -> Result<Shape> {
    let [_, c_in, h, wd] = x.0;
    let [c_out, wc_in, kh, kw] = w.0;
    if g.stride == 0 {
        return Err(Error::shape("conv2d", "stride", "stride must be >= 1"));
    }
    if g.dilation == 0 {
        return Err(Error::shape("conv2d", "dilation", "dilation must be >= 1"));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::shape("conv2d", "kernel", "kernel must be non-empty"));
    }
    if c_in != wc_in {
        return Err(Error::shape(
            "conv2d",
            "C_in",
            format!("input has {c_in} channels, weight {w} expects {wc_in}"),
        ));
    }
    let oh = g.out_size(h, kh).ok_or_else(|| {
        Error::shape("conv2d", "H", format!("height {h} too small for kernel {kh} with {g:?}"))
    })?;
    let ow = g.out_size(wd, kw).ok_or_else(|| {
        Error::shape("conv2d", "W", format!("width {wd} too small for kernel {kw} with {g:?}"))
    })?;
    Ok(Shape::new(x.b(), c_out, oh, ow))
}

fn dims(x: Shape, w: Shape, out: Shape) -> ConvDims {
    ConvDims {
        c_in: x.c(),
        h: x.h(),
        w: x.w(),
        kh: w.h(),
        kw: w.w(),
        oh: out.h(),
        ow: out.w(),
    }
}

pub(crate) fn conv_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let out_shape = conv_output_shape(x.shape(), w.shape(), g)?;
    if let Some(b) = bias {
        if b.numel() != out_shape.c() {
            return Err(Error::shape(
                "conv2d",
                "C_out",
                format!("bias has {} values for {} output channels", b.numel(), out_shape.c()),
            ));
        }
    }
    let d = dims(x.shape(), w.shape(), out_shape);
    let c_out = out_shape.c();
    let k = d.c_in * d.kh * d.kw;
    let p = d.oh * d.ow;
    let in_per = d.c_in * d.h * d.w;
    let mut out = Tensor::zeros(out_shape);
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..out_shape.b() {
        let xs = &x.data()[bi * in_per..(bi + 1) * in_per];
        let dst = &mut out.data_mut()[bi * c_out * p..(bi + 1) * c_out * p];
        let rhs: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, &d, g, &mut cols);
            &cols
        };
        T::gemm(c_out, k, p, w.data(), k as isize, 1, rhs, p as isize, 1, T::zero(), dst, p as isize, 1);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    out_shape: Shape,
    g: ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let d = dims(x.shape(), w.shape(), out_shape);
    let c_out = out_shape.c();
    let k = d.c_in * d.kh * d.kw;
    let p = d.oh * d.ow;
    let in_per = d.c_in * d.h * d.w;
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let (want_dx, want_dw, want_db) = want;

    let mut dx = want_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.numel()]);
    let mut db = want_db.then(|| vec![T::zero(); c_out]);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); if want_dx && !pointwise { k * p } else { 0 }];

    for bi in 0..out_shape.b() {
        let dyb = &dy[bi * c_out * p..(bi + 1) * c_out * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyb.chunks_exact(p).enumerate() {
                let mut s = T::zero();
                for &v in row {
                    s += v;
                }
                db[co] += s;
            }
        }
        let xs = &x.data()[bi * in_per..(bi + 1) * in_per];
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &d, g, &mut cols);
                &cols
            };
            // dW (Cout x K) += dY (Cout x P) * cols^T (P x K)
            T::gemm(c_out, p, k, dyb, p as isize, 1, rhs, 1, p as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * in_per..(bi + 1) * in_per];
            if pointwise {
                // dX (K x P) += W^T (K x Cout) * dY (Cout x P)
                T::gemm(k, c_out, p, w.data(), 1, k as isize, dyb, p as isize, 1, T::one(), dxb, p as isize, 1);
            } else {
                T::gemm(k, c_out, p, w.data(), 1, k as isize, dyb, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(&dcols, &d, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source taps for half-pixel (align_corners = false) linear resampling along
/// one axis: `(lower index, upper index, weight of upper)`.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Reflection without edge repeat (`-1 -> 1`). Planes of length one replicate.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}
