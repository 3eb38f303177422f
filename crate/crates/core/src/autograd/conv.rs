//! Stride-1 2-D cross-correlation kernels and spatial resampling.
//!
//! Each active kernel tap is one GEMM between the weight slice and a shifted,
//! zero-padded copy of the input. Masked taps are never visited, so they add
//! exactly nothing to the output and receive exactly zero gradient.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero padding, dilation and optional tap mask of a convolution.
#[derive(Clone, Debug, Default)]
pub struct ConvGeom {
    pub pad: usize,
    pub dilation: usize,
    /// Row-major `kh x kw`; `false` taps are removed.
    pub mask: Option<Rc<[bool]>>,
}

impl ConvGeom {
    /// Padding that preserves spatial size for a square `k x k` kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            pad: dilation * (k - 1) / 2,
            dilation,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask.into());
        self
    }

    fn dilation(&self) -> usize {
        self.dilation.max(1)
    }
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    fn taps<'a>(&'a self, geom: &'a ConvGeom) -> impl Iterator<Item = (usize, isize, isize)> + 'a {
        let d = geom.dilation() as isize;
        let p = geom.pad as isize;
        (0..self.kh * self.kw).filter_map(move |t| {
            if let Some(m) = &geom.mask {
                if !m[t] {
                    return None;
                }
            }
            let (ky, kx) = ((t / self.kw) as isize, (t % self.kw) as isize);
            Some((t, ky * d - p, kx * d - p))
        })
    }
}

pub(crate) fn conv_shape(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<ConvShape> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(m) = &geom.mask {
        if m.len() != kh * kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                reason: format!("mask has {} entries for a {kh}x{kw} kernel", m.len()),
            });
        }
    }
    let d = geom.dilation();
    let span_h = d * (kh - 1);
    let span_w = d * (kw - 1);
    if h + 2 * geom.pad < span_h + 1 || wd + 2 * geom.pad < span_w + 1 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("kernel span exceeds padded input {h}x{wd}"),
        });
    }
    Ok(ConvShape {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho: h + 2 * geom.pad - span_h,
        wo: wd + 2 * geom.pad - span_w,
    })
}

/// Copy input planes shifted by `(dy, dx)` into `dst` (`cin x ho x wo`).
fn shift_into(src: &[f64], s: &ConvShape, dy: isize, dx: isize, dst: &mut [f64]) {
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    let (x0, x1) = valid_range(dx, s.w, s.wo);
    for c in 0..s.cin {
        let src = &src[c * plane_in..(c + 1) * plane_in];
        let dst = &mut dst[c * plane_out..(c + 1) * plane_out];
        for y in 0..s.ho {
            let row = &mut dst[y * s.wo..(y + 1) * s.wo];
            let sy = y as isize + dy;
            if sy < 0 || sy >= s.h as isize || x0 >= x1 {
                row.fill(0.0);
                continue;
            }
            let srow = &src[sy as usize * s.w..(sy as usize + 1) * s.w];
            row[..x0].fill(0.0);
            row[x1..].fill(0.0);
            let sx0 = (x0 as isize + dx) as usize;
            row[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
        }
    }
}

/// Inverse of [`shift_into`]: accumulate `src` (`cin x ho x wo`) into `dst`.
fn unshift_add(src: &[f64], s: &ConvShape, dy: isize, dx: isize, dst: &mut [f64]) {
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    let (x0, x1) = valid_range(dx, s.w, s.wo);
    if x0 >= x1 {
        return;
    }
    for c in 0..s.cin {
        let src = &src[c * plane_out..(c + 1) * plane_out];
        let dst = &mut dst[c * plane_in..(c + 1) * plane_in];
        for y in 0..s.ho {
            let sy = y as isize + dy;
            if sy < 0 || sy >= s.h as isize {
                continue;
            }
            let sx0 = (x0 as isize + dx) as usize;
            let drow = &mut dst[sy as usize * s.w + sx0..sy as usize * s.w + sx0 + (x1 - x0)];
            for (d, v) in drow.iter_mut().zip(&src[y * s.wo + x0..y * s.wo + x1]) {
                *d += v;
            }
        }
    }
}

/// Output columns `[x0, x1)` whose shifted source column is in bounds.
fn valid_range(dx: isize, w: usize, wo: usize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, wo as isize) as usize;
    (x0.min(wo), x1.max(x0.min(wo)))
}

fn is_identity_shift(s: &ConvShape, dy: isize, dx: isize) -> bool {
    dy == 0 && dx == 0 && s.ho == s.h && s.wo == s.w
}

/// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds are checked here; the kernel itself does no checking.
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: all addressed elements lie inside the slices (asserted above)
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    geom: &ConvGeom,
) -> Result<Tensor> {
    let s = conv_shape(x, w, geom)?;
    if let Some(b) = b {
        if b.numel() != s.cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![s.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let plane_in = s.cin * s.h * s.w;
    let hw = s.ho * s.wo;
    let mut out = vec![0.0; s.n * s.cout * hw];
    let mut shifted = vec![0.0; s.cin * hw];
    let ksz = s.kh * s.kw;
    let wd = w.data();
    for n in 0..s.n {
        let xin = &x.data()[n * plane_in..(n + 1) * plane_in];
        let o = &mut out[n * s.cout * hw..(n + 1) * s.cout * hw];
        if let Some(b) = b {
            for (co, bv) in b.data().iter().enumerate() {
                o[co * hw..(co + 1) * hw].fill(*bv);
            }
        }
        for (t, dy, dx) in s.taps(geom) {
            let src: &[f64] = if is_identity_shift(&s, dy, dx) {
                xin
            } else {
                shift_into(xin, &s, dy, dx, &mut shifted);
                &shifted
            };
            gemm(
                s.cout,
                s.cin,
                hw,
                &wd[t..],
                s.cin * ksz,
                ksz,
                src,
                hw,
                1,
                1.0,
                o,
                hw,
                1,
            );
        }
    }
    Tensor::new(&[s.n, s.cout, s.ho, s.wo], out)?.check_finite("conv2d")
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeom,
    gout: &Tensor,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let s = conv_shape(x, w, geom)?;
    let plane_in = s.cin * s.h * s.w;
    let hw = s.ho * s.wo;
    let ksz = s.kh * s.kw;
    let wd = w.data();
    let mut gx = need.0.then(|| vec![0.0; x.numel()]);
    let mut gw = need.1.then(|| vec![0.0; w.numel()]);
    let mut gb = need.2.then(|| vec![0.0; s.cout]);
    let mut shifted = vec![0.0; s.cin * hw];
    let mut gshift = vec![0.0; s.cin * hw];
    for n in 0..s.n {
        let xin = &x.data()[n * plane_in..(n + 1) * plane_in];
        let g = &gout.data()[n * s.cout * hw..(n + 1) * s.cout * hw];
        if let Some(gb) = gb.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
        }
        for (t, dy, dx) in s.taps(geom) {
            let identity = is_identity_shift(&s, dy, dx);
            if let Some(gw) = gw.as_mut() {
                let src: &[f64] = if identity {
                    xin
                } else {
                    shift_into(xin, &s, dy, dx, &mut shifted);
                    &shifted
                };
                // dW_t (cout x cin) += G (cout x hw) * S^T (hw x cin)
                gemm(
                    s.cout,
                    hw,
                    s.cin,
                    g,
                    hw,
                    1,
                    src,
                    1,
                    hw,
                    1.0,
                    &mut gw[t..],
                    s.cin * ksz,
                    ksz,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[n * plane_in..(n + 1) * plane_in];
                if identity {
                    gemm(
                        s.cin,
                        s.cout,
                        hw,
                        &wd[t..],
                        ksz,
                        s.cin * ksz,
                        g,
                        hw,
                        1,
                        1.0,
                        gxn,
                        hw,
                        1,
                    );
                } else {
                    // dS (cin x hw) = W_t^T (cin x cout) * G (cout x hw)
                    gemm(
                        s.cin,
                        s.cout,
                        hw,
                        &wd[t..],
                        ksz,
                        s.cin * ksz,
                        g,
                        hw,
                        1,
                        0.0,
                        &mut gshift,
                        hw,
                        1,
                    );
                    unshift_add(&gshift, &s, dy, dx, gxn);
                }
            }
        }
    }
    Ok(ConvGrads {
        x: gx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        w: gw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        b: gb.map(|d| Tensor::new(&[s.cout], d)).transpose()?,
    })
}

pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "avg_pool2d",
            reason: format!("spatial size {h}x{w} not divisible by 2"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2_backward(x_shape: &[usize], g: &Tensor) -> Result<Tensor> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(x_shape);
    for (p, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let gp = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = 0.25 * gp[(y / 2) * wo + xx / 2];
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for (p, plane) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                plane[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2_backward(x_shape: &[usize], g: &Tensor) -> Result<Tensor> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let wo = 2 * w;
    let mut out = Tensor::zeros(x_shape);
    for (p, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let gp = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..wo {
                plane[(y / 2) * w + xx / 2] += gp[y * wo + xx];
            }
        }
    }
    Ok(out)
}
