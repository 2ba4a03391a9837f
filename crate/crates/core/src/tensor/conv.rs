//! Direct 2-D cross-correlation kernels, forward and backward.
//!
//! The width axis can pad with zeros or wrap around (for data with a 360°
//! horizontal field of view); the height axis always zero-pads. Work is
//! split over output (forward) or input/kernel (backward) channels, so
//! every element is written by exactly one rayon task and the inner
//! accumulation order is fixed: results do not depend on the worker count.

use rayon::prelude::*;

use super::Scalar;
use crate::{Error, Result};

/// Horizontal padding behavior; the vertical axis always zero-pads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    Zero,
    Circular,
}

#[derive(Debug, Clone)]
pub struct Conv2dCfg {
    /// (row, column) stride.
    pub stride: (usize, usize),
    /// (row, column) dilation.
    pub dilation: (usize, usize),
    /// (vertical, horizontal) padding amounts.
    pub pad: (usize, usize),
    pub horizontal: PaddingMode,
}

impl Conv2dCfg {
    /// Stride-1 "same" configuration for an odd `k`: pad = dilation*(k-1)/2
    /// on both axes.
    pub fn same(k: usize, dilation: usize, horizontal: PaddingMode) -> Self {
        let pad = dilation * (k - 1) / 2;
        Self {
            stride: (1, 1),
            dilation: (dilation, dilation),
            pad: (pad, pad),
            horizontal,
        }
    }

    pub fn strided(k: usize, stride: usize, horizontal: PaddingMode) -> Self {
        let pad = (k - 1) / 2;
        Self {
            stride: (stride, stride),
            dilation: (1, 1),
            pad: (pad, pad),
            horizontal,
        }
    }
}

/// Output spatial dims for an `[h, w]` input under `cfg` with kernel
/// `(kh, kw)`.
pub fn conv2d_out_dims(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    cfg: &Conv2dCfg,
) -> Result<(usize, usize)> {
    if cfg.stride.0 == 0 || cfg.stride.1 == 0 || cfg.dilation.0 == 0 || cfg.dilation.1 == 0 {
        return Err(Error::contract("conv2d: stride and dilation must be >= 1"));
    }
    if cfg.horizontal == PaddingMode::Circular && cfg.pad.1 >= w {
        return Err(Error::contract(format!(
            "conv2d: circular pad {} must be < width {}",
            cfg.pad.1, w
        )));
    }
    let span_h = cfg.dilation.0 * (kh - 1) + 1;
    let span_w = cfg.dilation.1 * (kw - 1) + 1;
    if h + 2 * cfg.pad.0 < span_h || w + 2 * cfg.pad.1 < span_w {
        return Err(Error::contract(format!(
            "conv2d: kernel span ({span_h}, {span_w}) does not fit padded input ({}, {})",
            h + 2 * cfg.pad.0,
            w + 2 * cfg.pad.1
        )));
    }
    let ho = (h + 2 * cfg.pad.0 - span_h) / cfg.stride.0 + 1;
    let wo = (w + 2 * cfg.pad.1 - span_w) / cfg.stride.1 + 1;
    Ok((ho, wo))
}

pub(super) fn forward<T: Scalar>(
    input: &[T],
    in_shape: &[usize],
    kernel: &[T],
    k_shape: &[usize],
    cfg: &Conv2dCfg,
) -> Result<(Vec<T>, Vec<usize>)> {
    if in_shape.len() != 3 || k_shape.len() != 4 {
        return Err(Error::contract(format!(
            "conv2d: input {in_shape:?} must be [C,H,W] and kernel {k_shape:?} [Co,Ci,kh,kw]"
        )));
    }
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (co, kci, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if ci != kci {
        return Err(Error::contract(format!(
            "conv2d: input has {ci} channels, kernel expects {kci}"
        )));
    }
    let (ho, wo) = conv2d_out_dims((h, w), (kh, kw), cfg)?;
    let mut out = vec![T::zero(); co * ho * wo];
    let wrap = cfg.horizontal == PaddingMode::Circular;
    let (sy, sx) = cfg.stride;
    let (dy, dx) = cfg.dilation;
    let (py, px) = cfg.pad;

    out.par_chunks_mut(ho * wo).enumerate().for_each(|(oc, out_c)| {
        for ic in 0..ci {
            let in_c = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kernel[((oc * ci + ic) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = (oy * sy + ky * dy) as isize - py as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &in_c[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out_c[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * sx + kx * dx) as isize - px as isize;
                            let ix = if wrap {
                                ix.rem_euclid(w as isize) as usize
                            } else if ix < 0 || ix >= w as isize {
                                continue;
                            } else {
                                ix as usize
                            };
                            *o = *o + wgt * row[ix];
                        }
                    }
                }
            }
        }
    });
    Ok((out, vec![co, ho, wo]))
}

pub(super) fn backward<T: Scalar>(
    input: &[T],
    in_shape: &[usize],
    kernel: &[T],
    k_shape: &[usize],
    gout: &[T],
    out_shape: &[usize],
    cfg: &Conv2dCfg,
) -> (Vec<T>, Vec<T>) {
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (co, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let wrap = cfg.horizontal == PaddingMode::Circular;
    let (sy, sx) = cfg.stride;
    let (dy, dx) = cfg.dilation;
    let (py, px) = cfg.pad;

    let mut din = vec![T::zero(); ci * h * w];
    din.par_chunks_mut(h * w).enumerate().for_each(|(ic, din_c)| {
        for oc in 0..co {
            let g_c = &gout[oc * ho * wo..(oc + 1) * ho * wo];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kernel[((oc * ci + ic) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = (oy * sy + ky * dy) as isize - py as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut din_c[iy as usize * w..(iy as usize + 1) * w];
                        let grow = &g_c[oy * wo..(oy + 1) * wo];
                        for (ox, &g) in grow.iter().enumerate() {
                            let ix = (ox * sx + kx * dx) as isize - px as isize;
                            let ix = if wrap {
                                ix.rem_euclid(w as isize) as usize
                            } else if ix < 0 || ix >= w as isize {
                                continue;
                            } else {
                                ix as usize
                            };
                            drow[ix] = drow[ix] + wgt * g;
                        }
                    }
                }
            }
        }
    });

    let mut dker = vec![T::zero(); kernel.len()];
    dker.par_chunks_mut(ci * kh * kw)
        .enumerate()
        .for_each(|(oc, dker_c)| {
            let g_c = &gout[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..ci {
                let in_c = &input[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let iy = (oy * sy + ky * dy) as isize - py as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &in_c[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &g_c[oy * wo..(oy + 1) * wo];
                            for (ox, &g) in grow.iter().enumerate() {
                                let ix = (ox * sx + kx * dx) as isize - px as isize;
                                let ix = if wrap {
                                    ix.rem_euclid(w as isize) as usize
                                } else if ix < 0 || ix >= w as isize {
                                    continue;
                                } else {
                                    ix as usize
                                };
                                acc = acc + g * row[ix];
                            }
                        }
                        dker_c[(ic * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });

    (din, dker)
}
