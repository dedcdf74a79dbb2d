//! Stride-1 dilated 2D convolution with zero same-padding.
//!
//! Both passes lower the convolution to matrix products over an im2col
//! buffer built for a band of output rows at a time, so the scratch memory
//! stays bounded for large slices and wide layers.

use super::gemm::{gemm, MatMut, MatRef};
use super::Tensor4;
use crate::error::{Error, Result};

/// Target number of output pixels per im2col band.
const BAND_PIXELS: usize = 4096;

/// Convolution weights (Cout×Cin×Kh×Kw), dilation and optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    weights: Vec<f64>,
    shape: [usize; 4],
    dilation: usize,
    bias: Option<Vec<f64>>,
}

impl ConvKernel {
    pub fn new(
        shape: [usize; 4],
        weights: Vec<f64>,
        dilation: usize,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let [cout, cin, kh, kw] = shape;
        if cout == 0 || cin == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!("kernel extents must be positive, got {shape:?}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "kernel extent {kh}x{kw} must be odd for same-padding"
            )));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        if weights.len() != cout * cin * kh * kw {
            return Err(Error::shape(format!(
                "{} weights for kernel shape {shape:?}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != cout {
                return Err(Error::shape(format!("{} biases for {cout} output channels", b.len())));
            }
        }
        Ok(ConvKernel {
            weights,
            shape,
            dilation,
            bias,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    fn geometry(&self, input: &Tensor4) -> Result<ConvGeometry> {
        let [n, c, h, w] = input.shape();
        let [cout, cin, kh, kw] = self.shape;
        if c != cin {
            return Err(Error::shape(format!(
                "input has {c} channels, kernel expects {cin}"
            )));
        }
        Ok(ConvGeometry {
            batch: n,
            in_ch: cin,
            out_ch: cout,
            height: h,
            width: w,
            kh,
            kw,
            dilation: self.dilation,
        })
    }
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_forward(input: &Tensor4, kernel: &ConvKernel) -> Result<Tensor4> {
    let geo = kernel.geometry(input)?;
    let mut out = vec![0.0; geo.batch * geo.out_ch * geo.plane()];
    conv_forward_raw(&geo, input.data(), &kernel.weights, kernel.bias(), &mut out);
    Tensor4::from_vec([geo.batch, geo.out_ch, geo.height, geo.width], out)
}

pub fn conv2d_backward(
    input: &Tensor4,
    kernel: &ConvKernel,
    grad_out: &Tensor4,
) -> Result<ConvGrads> {
    let geo = kernel.geometry(input)?;
    let expected = [geo.batch, geo.out_ch, geo.height, geo.width];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match forward output {expected:?}",
            grad_out.shape()
        )));
    }
    let mut grad_input = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; kernel.weights.len()];
    let mut grad_b = kernel.bias.as_ref().map(|b| vec![0.0; b.len()]);
    conv_backward_raw(
        &geo,
        input.data(),
        &kernel.weights,
        grad_out.data(),
        Some(&mut grad_input),
        &mut grad_w,
        grad_b.as_deref_mut(),
    );
    Ok(ConvGrads {
        input: Tensor4::from_vec(input.shape(), grad_input)?,
        weights: grad_w,
        bias: grad_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    fn taps(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn band_rows(&self) -> usize {
        (BAND_PIXELS / self.width.max(1)).clamp(1, self.height)
    }

    /// Signed (dy, dx) sample offset of tap (i, j).
    fn offset(&self, i: usize, j: usize) -> (isize, isize) {
        let d = self.dilation as isize;
        (
            d * (i as isize - (self.kh / 2) as isize),
            d * (j as isize - (self.kw / 2) as isize),
        )
    }

    /// Valid destination column range `[lo, hi)` for a horizontal offset.
    fn col_span(&self, dx: isize) -> (usize, usize) {
        let w = self.width as isize;
        let lo = (-dx).clamp(0, w) as usize;
        let hi = (w - dx).clamp(0, w) as usize;
        (lo, hi.max(lo))
    }
}

fn im2col(geo: &ConvGeometry, sample: &[f64], y0: usize, rows: usize, cols: &mut [f64]) {
    let w = geo.width;
    let plane = geo.plane();
    let p = rows * w;
    for c in 0..geo.in_ch {
        let chan = &sample[c * plane..(c + 1) * plane];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let r = (c * geo.kh + i) * geo.kw + j;
                let dst = &mut cols[r * p..(r + 1) * p];
                let (dy, dx) = geo.offset(i, j);
                let (lo, hi) = geo.col_span(dx);
                for yy in 0..rows {
                    let row = &mut dst[yy * w..(yy + 1) * w];
                    let sy = (y0 + yy) as isize + dy;
                    if sy < 0 || sy >= geo.height as isize || lo == hi {
                        row.fill(0.0);
                        continue;
                    }
                    let src = &chan[sy as usize * w..(sy as usize + 1) * w];
                    row[..lo].fill(0.0);
                    row[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add(geo: &ConvGeometry, cols: &[f64], y0: usize, rows: usize, sample: &mut [f64]) {
    let w = geo.width;
    let plane = geo.plane();
    let p = rows * w;
    for c in 0..geo.in_ch {
        let chan = &mut sample[c * plane..(c + 1) * plane];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let r = (c * geo.kh + i) * geo.kw + j;
                let src = &cols[r * p..(r + 1) * p];
                let (dy, dx) = geo.offset(i, j);
                let (lo, hi) = geo.col_span(dx);
                if lo == hi {
                    continue;
                }
                for yy in 0..rows {
                    let sy = (y0 + yy) as isize + dy;
                    if sy < 0 || sy >= geo.height as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let dst = &mut chan[sy as usize * w + s0..sy as usize * w + s0 + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(&src[yy * w + lo..yy * w + hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Forward pass on raw buffers; `out` is overwritten.
pub(crate) fn conv_forward_raw(
    geo: &ConvGeometry,
    input: &[f64],
    weights: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let plane = geo.plane();
    let taps = geo.taps();
    let band = geo.band_rows();
    let mut cols = vec![0.0; taps * band * geo.width];
    let in_stride = geo.in_ch * plane;
    let out_stride = geo.out_ch * plane;
    debug_assert_eq!(input.len(), geo.batch * in_stride);
    debug_assert_eq!(out.len(), geo.batch * out_stride);

    for n in 0..geo.batch {
        let sample = &input[n * in_stride..(n + 1) * in_stride];
        let out_n = &mut out[n * out_stride..(n + 1) * out_stride];
        let mut y0 = 0;
        while y0 < geo.height {
            let rows = band.min(geo.height - y0);
            let p = rows * geo.width;
            im2col(geo, sample, y0, rows, &mut cols[..taps * p]);
            let off = y0 * geo.width;
            gemm(
                1.0,
                MatRef { data: weights, rows: geo.out_ch, cols: taps, row_stride: taps, col_stride: 1 },
                MatRef { data: &cols[..taps * p], rows: taps, cols: p, row_stride: p, col_stride: 1 },
                0.0,
                MatMut { data: &mut out_n[off..], rows: geo.out_ch, cols: p, row_stride: plane, col_stride: 1 },
            );
            y0 += rows;
        }
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                for v in &mut out_n[o * plane..(o + 1) * plane] {
                    *v += bo;
                }
            }
        }
    }
}

/// Backward pass on raw buffers. `grad_input`, `grad_w` and `grad_b` are
/// overwritten; pass `None` for `grad_input` when it is not needed.
pub(crate) fn conv_backward_raw(
    geo: &ConvGeometry,
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) {
    let plane = geo.plane();
    let taps = geo.taps();
    let band = geo.band_rows();
    let mut cols = vec![0.0; taps * band * geo.width];
    let mut gcols = if grad_input.is_some() {
        vec![0.0; taps * band * geo.width]
    } else {
        Vec::new()
    };
    let in_stride = geo.in_ch * plane;
    let out_stride = geo.out_ch * plane;

    grad_w.fill(0.0);
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.fill(0.0);
    }
    if let Some(gb) = grad_b {
        gb.fill(0.0);
        for n in 0..geo.batch {
            for (o, g) in gb.iter_mut().enumerate() {
                let start = n * out_stride + o * plane;
                *g += grad_out[start..start + plane].iter().sum::<f64>();
            }
        }
    }

    for n in 0..geo.batch {
        let sample = &input[n * in_stride..(n + 1) * in_stride];
        let gout_n = &grad_out[n * out_stride..(n + 1) * out_stride];
        let mut y0 = 0;
        while y0 < geo.height {
            let rows = band.min(geo.height - y0);
            let p = rows * geo.width;
            let off = y0 * geo.width;
            im2col(geo, sample, y0, rows, &mut cols[..taps * p]);
            let g = MatRef {
                data: &gout_n[off..],
                rows: geo.out_ch,
                cols: p,
                row_stride: plane,
                col_stride: 1,
            };
            gemm(
                1.0,
                g,
                MatRef { data: &cols[..taps * p], rows: p, cols: taps, row_stride: 1, col_stride: p },
                1.0,
                MatMut { data: grad_w, rows: geo.out_ch, cols: taps, row_stride: taps, col_stride: 1 },
            );
            if let Some(gi) = grad_input.as_deref_mut() {
                gemm(
                    1.0,
                    MatRef { data: weights, rows: taps, cols: geo.out_ch, row_stride: 1, col_stride: taps },
                    g,
                    0.0,
                    MatMut { data: &mut gcols[..taps * p], rows: taps, cols: p, row_stride: p, col_stride: 1 },
                );
                col2im_add(geo, &gcols[..taps * p], y0, rows, &mut gi[n * in_stride..(n + 1) * in_stride]);
            }
            y0 += rows;
        }
    }
}
