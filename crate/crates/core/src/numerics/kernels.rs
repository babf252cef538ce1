//! Raw forward/backward kernels over flat row-major buffers.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
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
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::Shape(format!("conv2d input must be C×H×W, got {input:?}"))),
        };
        let (cout, kc, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d kernel must be Cout×Cin×k×k, got {kernel:?}"
                )))
            }
        };
        if kc != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kc}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {h}×{w} (+{pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn cols(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<'a>(input: &'a [f64], g: &ConvGeom) -> Cow<'a, [f64]> {
    if g.is_pointwise() {
        return Cow::Borrowed(input);
    }
    let n = g.pixels();
    let mut col = vec![0.0; g.cols() * n];
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(col)
}

fn col2im(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let n = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `out[co] = Σ kernel[co, ci] ⋆ input[ci] + bias[co]`.
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let n = g.pixels();
    let kk = g.cols();
    let col = im2col(input, g);
    let mut out = vec![0.0; g.cout * n];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(b[co]);
        }
    }
    gemm(
        g.cout,
        kk,
        n,
        kernel,
        (kk as isize, 1),
        &col,
        (n as isize, 1),
        if bias.is_some() { 1.0 } else { 0.0 },
        &mut out,
    );
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let n = g.pixels();
    let kk = g.cols();
    let kernel_grad = want.1.then(|| {
        let col = im2col(input, g);
        let mut dk = vec![0.0; g.cout * kk];
        // dK[cout×kk] = dOut[cout×n] · colᵀ[n×kk]
        gemm(
            g.cout,
            n,
            kk,
            grad_out,
            (n as isize, 1),
            &col,
            (1, n as isize),
            0.0,
            &mut dk,
        );
        dk
    });
    let input_grad = want.0.then(|| {
        // dCol[kk×n] = Kᵀ[kk×cout] · dOut[cout×n]
        let mut dcol = vec![0.0; kk * n];
        gemm(
            kk,
            g.cout,
            n,
            kernel,
            (1, kk as isize),
            grad_out,
            (n as isize, 1),
            0.0,
            &mut dcol,
        );
        if g.is_pointwise() {
            dcol
        } else {
            let mut dx = vec![0.0; g.cin * g.h * g.w];
            col2im(&dcol, g, &mut dx);
            dx
        }
    });
    let bias_grad = want
        .2
        .then(|| grad_out.chunks(n).map(|row| row.iter().sum()).collect());
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}

/// 2×2 max pooling with stride 2; returns pooled values and flat argmax indices.
pub fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Per-axis taps for 2× bilinear upsampling with half-pixel centres.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2_forward(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Numerically stable log-softmax over the channel axis at one pixel.
#[inline]
pub fn log_softmax_at(logits: &[f64], c: usize, hw: usize, p: usize, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for k in 0..c {
        max = max.max(logits[k * hw + p]);
    }
    let mut z = 0.0;
    for k in 0..c {
        z += (logits[k * hw + p] - max).exp();
    }
    let lz = z.ln() + max;
    for k in 0..c {
        out[k] = logits[k * hw + p] - lz;
    }
}
