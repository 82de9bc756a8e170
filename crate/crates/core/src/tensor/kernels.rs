//! Forward and backward kernels shared by the graph and by direct callers.
//!
//! Convolution uses cross-correlation semantics (no kernel flip) with unit
//! stride, matching the usual deep-learning convention.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{BiteError, Result};

/// Zero padding applied before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    None,
    /// `(height, width)` zeros on both sides of each spatial axis.
    Symmetric(usize, usize),
    /// Zeros on the leading edge of the last axis only.
    CausalLeft(usize),
    /// Pads so the output keeps the input's spatial size. Even effective
    /// kernels put the extra zero on the trailing side.
    Same,
}

/// Resolved `(top, bottom, left, right)` padding amounts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn resolve(self, kernel: (usize, usize), dilation: (usize, usize)) -> Pads {
        match self {
            Padding::None => Pads { top: 0, bottom: 0, left: 0, right: 0 },
            Padding::Symmetric(h, w) => Pads { top: h, bottom: h, left: w, right: w },
            Padding::CausalLeft(w) => Pads { top: 0, bottom: 0, left: w, right: 0 },
            Padding::Same => {
                let eh = (kernel.0 - 1) * dilation.0;
                let ew = (kernel.1 - 1) * dilation.1;
                Pads {
                    top: eh / 2,
                    bottom: eh - eh / 2,
                    left: ew / 2,
                    right: ew - ew / 2,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub groups: usize,
    pub dilation: (usize, usize),
    pub padding: Padding,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { groups: 1, dilation: (1, 1), padding: Padding::None }
    }
}

impl Conv2dSpec {
    pub fn new(groups: usize, dilation: (usize, usize), padding: Padding) -> Self {
        Self { groups, dilation, padding }
    }
}

/// Geometry of one convolution call, validated once and reused by the
/// forward and backward kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    dh: usize,
    dw: usize,
    pads: Pads,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], weight: &[usize], spec: &Conv2dSpec) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(BiteError::shape(format!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            )));
        }
        let (batch, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(BiteError::config(format!(
                "conv2d channel grouping mismatch: input {input:?}, weight {weight:?}, groups {groups}"
            )));
        }
        let (dh, dw) = spec.dilation;
        if dh == 0 || dw == 0 {
            return Err(BiteError::config(format!(
                "conv2d dilation must be >= 1, got {:?}",
                spec.dilation
            )));
        }
        let pads = spec.padding.resolve((kh, kw), (dh, dw));
        let eh = (kh - 1) * dh + 1;
        let ew = (kw - 1) * dw + 1;
        let ph = h + pads.top + pads.bottom;
        let pw = w + pads.left + pads.right;
        if ph < eh || pw < ew {
            return Err(BiteError::shape(format!(
                "conv2d kernel {weight:?} (dilation {:?}) larger than padded input {input:?}",
                spec.dilation
            )));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / groups,
            kh,
            kw,
            dh,
            dw,
            pads,
            ho: ph - eh + 1,
            wo: pw - ew + 1,
        })
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    /// Calls `f(in_offset, out_offset, weight_index, ow_lo, ow_hi, iw_shift)` for
    /// every valid (input row, output row, tap) triple; `iw = ow + shift - left`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let g = self;
        for b in 0..g.batch {
            for oc in 0..g.cout {
                let group = oc / g.cout_g;
                for icg in 0..g.cin_g {
                    let ic = group * g.cin_g + icg;
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let widx = ((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj;
                            let shift = kj * g.dw;
                            // ow valid when 0 <= ow + shift - left < w
                            let ow_lo = g.pads.left.saturating_sub(shift);
                            let ow_hi = (g.w + g.pads.left).saturating_sub(shift).min(g.wo);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in 0..g.ho {
                                let ih = oh + ki * g.dh;
                                if ih < g.pads.top || ih - g.pads.top >= g.h {
                                    continue;
                                }
                                let ih = ih - g.pads.top;
                                let in_off = ((b * g.cin + ic) * g.h + ih) * g.w;
                                let out_off = ((b * g.cout + oc) * g.ho + oh) * g.wo;
                                f(in_off, out_off, widx, ow_lo, ow_hi, shift);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation with groups, dilation and zero padding (stride 1).
///
/// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin/groups, kH, kW]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), weight.shape(), spec)?;
    Ok(conv2d_forward(&geo, input, weight))
}

pub(crate) fn conv2d_forward(geo: &ConvGeometry, input: &Tensor, weight: &Tensor) -> Tensor {
    let shape = geo.output_shape();
    let mut out = vec![0.0; shape.iter().product()];
    let x = input.data();
    let w = weight.data();
    let left = geo.pads.left;
    geo.for_each_tap(|in_off, out_off, widx, lo, hi, shift| {
        let wv = w[widx];
        let src = &x[in_off + lo + shift - left..in_off + hi + shift - left];
        let dst = &mut out[out_off + lo..out_off + hi];
        for (o, &i) in dst.iter_mut().zip(src) {
            *o += wv * i;
        }
    });
    Tensor::from_parts(shape, out)
}

pub(crate) fn conv2d_backward_input(geo: &ConvGeometry, grad_out: &Tensor, weight: &Tensor) -> Tensor {
    let mut gin = vec![0.0; geo.batch * geo.cin * geo.h * geo.w];
    let go = grad_out.data();
    let w = weight.data();
    let left = geo.pads.left;
    geo.for_each_tap(|in_off, out_off, widx, lo, hi, shift| {
        let wv = w[widx];
        let src = &go[out_off + lo..out_off + hi];
        let dst = &mut gin[in_off + lo + shift - left..in_off + hi + shift - left];
        for (d, &g) in dst.iter_mut().zip(src) {
            *d += wv * g;
        }
    });
    Tensor::from_parts(vec![geo.batch, geo.cin, geo.h, geo.w], gin)
}

pub(crate) fn conv2d_backward_weight(geo: &ConvGeometry, grad_out: &Tensor, input: &Tensor) -> Tensor {
    let mut gw = vec![0.0; geo.cout * geo.cin_g * geo.kh * geo.kw];
    let go = grad_out.data();
    let x = input.data();
    let left = geo.pads.left;
    geo.for_each_tap(|in_off, out_off, widx, lo, hi, shift| {
        let src = &x[in_off + lo + shift - left..in_off + hi + shift - left];
        let g = &go[out_off + lo..out_off + hi];
        gw[widx] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
    });
    Tensor::from_parts(vec![geo.cout, geo.cin_g, geo.kh, geo.kw], gw)
}

/// Plain `[M, K] x [K, N]` matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Ok(matmul_raw(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(BiteError::shape(format!(
            "matmul dimension mismatch: {a:?} x {b:?}"
        )));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn transpose(t: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = t[r * cols + c];
        }
    }
    out
}
