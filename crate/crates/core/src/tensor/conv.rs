//! Strided cross-correlation primitives shared by `conv2d`/`deconv2d`.
//!
//! Padding is "same"-style: the output spatial size is `ceil(in/stride)` and
//! the total zero padding is split with the smaller half on the top/left.
//! `input_grad` is the exact adjoint of `forward` for a fixed kernel, which
//! is also what `deconv2d` evaluates.

#![allow(clippy::too_many_arguments)]

/// Geometry of one conv application, anchored on the input-space size.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn same_geom(
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> ConvGeom {
    let h_out = h.div_ceil(stride);
    let w_out = w.div_ceil(stride);
    let pad_h = ((h_out - 1) * stride + kh).saturating_sub(h);
    let pad_w = ((w_out - 1) * stride + kw).saturating_sub(w);
    ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        h_out,
        w_out,
        pad_top: pad_h / 2,
        pad_left: pad_w / 2,
    }
}

/// y[n,o,oh,ow] = sum_{c,ki,kj} x[n,c,oh*s-pt+ki, ow*s-pl+kj] * k[o,c,ki,kj]
pub(crate) fn forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
    for b in 0..g.n {
        for o in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for ki in 0..g.kh {
                            let ih = (oh * g.stride + ki) as isize - g.pad_top as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let iw = (ow * g.stride + kj) as isize - g.pad_left as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                acc += x[((b * g.c_in + c) * g.h + ih as usize) * g.w
                                    + iw as usize]
                                    * k[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    y[((b * g.c_out + o) * g.h_out + oh) * g.w_out + ow] = acc;
                }
            }
        }
    }
    y
}

/// Adjoint of [`forward`] in the input argument: scatters `dy` back through
/// the kernel onto an input-shaped buffer.
pub(crate) fn input_grad(dy: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.c_in * g.h * g.w];
    for b in 0..g.n {
        for o in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let gout = dy[((b * g.c_out + o) * g.h_out + oh) * g.w_out + ow];
                    if gout == 0.0 {
                        continue;
                    }
                    for c in 0..g.c_in {
                        for ki in 0..g.kh {
                            let ih = (oh * g.stride + ki) as isize - g.pad_top as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let iw = (ow * g.stride + kj) as isize - g.pad_left as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                dx[((b * g.c_in + c) * g.h + ih as usize) * g.w + iw as usize] +=
                                    gout * k[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// dk[o,c,ki,kj] = sum_{n,oh,ow} x[n,c,oh*s-pt+ki, ...] * dy[n,o,oh,ow]
pub(crate) fn kernel_grad(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    for b in 0..g.n {
        for o in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let gout = dy[((b * g.c_out + o) * g.h_out + oh) * g.w_out + ow];
                    if gout == 0.0 {
                        continue;
                    }
                    for c in 0..g.c_in {
                        for ki in 0..g.kh {
                            let ih = (oh * g.stride + ki) as isize - g.pad_top as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let iw = (ow * g.stride + kj) as isize - g.pad_left as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                dk[((o * g.c_in + c) * g.kh + ki) * g.kw + kj] += gout
                                    * x[((b * g.c_in + c) * g.h + ih as usize) * g.w
                                        + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}
