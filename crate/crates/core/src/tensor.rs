//! Dense `f64` tensors and the raw numeric kernels behind every differentiable op.
//!
//! Kernels here are plain functions over slices. [`crate::autodiff::Tape`]
//! records calls to them and replays the matching backward kernels.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::math;

/// Row-major dense tensor. Gradient state lives on the [`crate::autodiff::Tape`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of a `[C, H, W]` tensor as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// Output size of a strided window: `floor((n + 2·pad − k) / stride) + 1`.
pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(config_err!("stride must be >= 1"));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(config_err!("kernel {} larger than padded input {}", k, padded));
    }
    Ok((padded - k) / stride + 1)
}

/// Geometry of one 2-D convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(dim_err!("conv2d expects [Cin,H,W] and [Cout,Cin,kh,kw], got {:?} and {:?}", input, kernel));
        }
        if input[0] != kernel[1] {
            return Err(dim_err!("conv2d input has {} channels, kernel expects {}", input[0], kernel[1]));
        }
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(config_err!("conv2d kernel sides must be odd, got {}x{}", kh, kw));
        }
        let ho = conv_out_size(input[1], kh, stride, pad)?;
        let wo = conv_out_size(input[2], kw, stride, pad)?;
        Ok(ConvGeom { cin: input[0], h: input[1], w: input[2], cout: kernel[0], kh, kw, stride, pad, ho, wo })
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    #[inline]
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.cols();
    let mut cols = vec![0.0; g.rows() * p];
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the loop vectorizes without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Cross-correlation of `input [Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(dim_err!("conv2d bias has {} entries, expected {}", b.len(), g.cout));
        }
    }
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    let (r, p) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.cout * p];
    let k = kernel.data();
    for co in 0..g.cout {
        let row = &mut out[co * p..(co + 1) * p];
        if let Some(b) = bias {
            row.fill(b.data()[co]);
        }
        for ri in 0..r {
            axpy(row, k[co * r + ri], &cols[ri * p..(ri + 1) * p]);
        }
    }
    Tensor::new(&[g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    let (r, p) = (g.rows(), g.cols());
    let k = kernel.data();
    let mut dk = vec![0.0; g.cout * r];
    let mut db = vec![0.0; g.cout];
    let mut dcols = vec![0.0; r * p];
    for co in 0..g.cout {
        let go = &grad_out[co * p..(co + 1) * p];
        db[co] = go.iter().sum();
        for ri in 0..r {
            let cr = &cols[ri * p..(ri + 1) * p];
            dk[co * r + ri] = dot(go, cr);
            axpy(&mut dcols[ri * p..(ri + 1) * p], k[co * r + ri], go);
        }
    }
    let din = if g.is_pointwise() {
        dcols
    } else {
        let mut d = vec![0.0; g.cin * g.h * g.w];
        col2im(&dcols, &g, &mut d);
        d
    };
    Ok((
        Tensor::new(input.shape(), din)?,
        Tensor::new(kernel.shape(), dk)?,
        Tensor::new(&[g.cout], db)?,
    ))
}

/// `y[n] = W · x[n] + b` for `x [N,Din]`, `W [Dout,Din]`, `b [Dout]`.
pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, din, dout) = affine_dims(x, w, b)?;
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let xi = &x.data()[i * din..(i + 1) * din];
        for o in 0..dout {
            let wo = &w.data()[o * din..(o + 1) * din];
            out[i * dout + o] = dot(wo, xi) + b.map_or(0.0, |b| b.data()[o]);
        }
    }
    Tensor::new(&[n, dout], out)
}

fn affine_dims(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(dim_err!("affine expects rank-2 x and W, got {:?} and {:?}", x.shape(), w.shape()));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    if w.shape()[1] != din {
        return Err(dim_err!("affine inner dims disagree: x {:?}, W {:?}", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.len() != dout {
            return Err(dim_err!("affine bias has {} entries, expected {}", b.len(), dout));
        }
    }
    Ok((n, din, dout))
}

/// Gradients of [`affine`] with respect to x, W, b.
pub fn affine_backward(x: &Tensor, w: &Tensor, grad_out: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, din, dout) = affine_dims(x, w, None)?;
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for i in 0..n {
        let xi = &x.data()[i * din..(i + 1) * din];
        for o in 0..dout {
            let go = grad_out[i * dout + o];
            db[o] += go;
            axpy(&mut dw[o * din..(o + 1) * din], go, xi);
            axpy(&mut dx[i * din..(i + 1) * din], go, &w.data()[o * din..(o + 1) * din]);
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?, Tensor::new(&[dout], db)?))
}

/// Corner indices and weights for one bilinear lookup, after border clamping.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
}

pub fn bilinear_tap(x: f64, y: f64, h: usize, w: usize) -> BilinearTap {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = math::floor(xc) as usize;
    let y0 = math::floor(yc) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    BilinearTap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}

/// Samples `feat [D,H,W]` at map-coordinate points `(x, y)`, giving `[Npts, D]`.
pub fn bilinear_sample(feat: &Tensor, points: &[(f64, f64)]) -> Result<Tensor> {
    if feat.rank() != 3 {
        return Err(dim_err!("bilinear_sample expects [D,H,W], got {:?}", feat.shape()));
    }
    let (d, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let mut out = vec![0.0; points.len() * d];
    for (p, &(x, y)) in points.iter().enumerate() {
        let tap = bilinear_tap(x, y, h, w);
        for c in 0..d {
            let plane = feat.channel(c);
            out[p * d + c] = (0..4).map(|i| tap.wt[i] * plane[tap.idx[i]]).sum();
        }
    }
    Tensor::new(&[points.len(), d], out)
}

pub fn bilinear_sample_backward(shape: &[usize], points: &[(f64, f64)], grad_out: &[f64]) -> Tensor {
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let mut g = Tensor::zeros(shape);
    let gd = g.data_mut();
    for (p, &(x, y)) in points.iter().enumerate() {
        let tap = bilinear_tap(x, y, h, w);
        for c in 0..d {
            let go = grad_out[p * d + c];
            for i in 0..4 {
                gd[c * h * w + tap.idx[i]] += tap.wt[i] * go;
            }
        }
    }
    g
}

/// Gradient of [`bilinear_sample`] with respect to the sample coordinates, `[Npts, 2]` flattened.
/// Clamped coordinates get zero gradient along the clamped axis.
pub fn bilinear_point_grads(feat: &Tensor, points: &[(f64, f64)], grad_out: &[f64]) -> Vec<f64> {
    let (d, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let mut out = vec![0.0; points.len() * 2];
    for (p, &(x, y)) in points.iter().enumerate() {
        let tap = bilinear_tap(x, y, h, w);
        let fx = tap.wt[1] + tap.wt[3];
        let fy = tap.wt[2] + tap.wt[3];
        let x_free = x > 0.0 && x < (w - 1) as f64;
        let y_free = y > 0.0 && y < (h - 1) as f64;
        let (mut gx, mut gy) = (0.0, 0.0);
        for c in 0..d {
            let plane = feat.channel(c);
            let [a, b, cc, dd] = tap.idx.map(|i| plane[i]);
            let go = grad_out[p * d + c];
            gx += go * ((1.0 - fy) * (b - a) + fy * (dd - cc));
            gy += go * ((1.0 - fx) * (cc - a) + fx * (dd - b));
        }
        out[2 * p] = if x_free { gx } else { 0.0 };
        out[2 * p + 1] = if y_free { gy } else { 0.0 };
    }
    out
}

/// `(outer, axis_len, inner)` strides for reductions along `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {} out of range for rank {}", axis, shape.len()));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, max-shifted for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..n {
                let e = math::exp(xd[at(k)] - m);
                out[at(k)] = e;
                s += e;
            }
            for k in 0..n {
                out[at(k)] /= s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Log-softmax along `axis`.
pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|k| math::exp(xd[at(k)] - m)).sum();
            let lse = m + math::ln(s);
            for k in 0..n {
                out[at(k)] = xd[at(k)] - lse;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, math::sigmoid)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

/// Nearest-neighbour resize of `[C,H,W]` to `[C,ho,wo]`; source index is `i·H/ho`.
pub fn resize_nearest(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(dim_err!("resize_nearest expects [C,H,W], got {:?}", x.shape()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = x.channel(ch);
        for oy in 0..ho {
            let sy = oy * h / ho;
            for ox in 0..wo {
                out[(ch * ho + oy) * wo + ox] = src[sy * w + ox * w / wo];
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub fn resize_nearest_backward(shape: &[usize], ho: usize, wo: usize, grad_out: &[f64]) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut g = Tensor::zeros(shape);
    let gd = g.data_mut();
    for ch in 0..c {
        for oy in 0..ho {
            let sy = oy * h / ho;
            for ox in 0..wo {
                gd[(ch * h + sy) * w + ox * w / wo] += grad_out[(ch * ho + oy) * wo + ox];
            }
        }
    }
    g
}
