//! 2D cross-correlation kernels: gemm for pointwise and im2col paths, direct
//! loops for depthwise.

use crate::real::{gemm, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            groups: channels,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == 1
            && self.spec.padding == 0
            && self.spec.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.spec.groups == self.cin && self.cin == self.cout && self.spec.groups > 1
    }

    /// Output columns `ox` whose input column `ox*s + k - pad` is in bounds.
    #[inline]
    fn valid_range(out: usize, input: usize, k: usize, pad: usize, s: usize) -> (usize, usize) {
        // ox*s + k >= pad  and  ox*s + k - pad <= input - 1
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
        let hi_num = input as isize - 1 + pad as isize - k as isize;
        let hi = if hi_num < 0 {
            0
        } else {
            (hi_num as usize / s + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let mut out = vec![T::zero(); g.cout * ohw];
    if g.is_pointwise() {
        gemm(
            MatRef::new(w, g.cout, g.cin),
            MatRef::new(x, g.cin, g.h * g.w),
            &mut out,
            false,
            false,
        );
    } else if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let kk = g.cin_g() * g.kh * g.kw;
        let mut col = vec![T::zero(); kk * ohw];
        for grp in 0..g.spec.groups {
            im2col(x, g, grp, &mut col);
            let wg = &w[grp * g.cout_g() * kk..(grp + 1) * g.cout_g() * kk];
            gemm(
                MatRef::new(wg, g.cout_g(), kk),
                MatRef::new(&col, kk, ohw),
                &mut out[grp * g.cout_g() * ohw..(grp + 1) * g.cout_g() * ohw],
                false,
                false,
            );
        }
    }
    out
}

/// Accumulates input and weight gradients for the requested operands.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let ohw = g.oh * g.ow;
    if g.is_pointwise() {
        let hw = g.h * g.w;
        if let Some(gw) = gw {
            // gW[co, ci] += sum_p gy[co, p] x[ci, p]
            gemm(
                MatRef::new(gy, g.cout, hw),
                MatRef::transposed(x, g.cin, hw),
                gw,
                false,
                true,
            );
        }
        if let Some(gx) = gx {
            gemm(
                MatRef::transposed(w, g.cout, g.cin),
                MatRef::new(gy, g.cout, hw),
                gx,
                false,
                true,
            );
        }
    } else if g.is_depthwise() {
        depthwise_backward(x, w, gy, g, gx, gw);
    } else {
        let kk = g.cin_g() * g.kh * g.kw;
        let mut col = vec![T::zero(); kk * ohw];
        let mut gcol = vec![T::zero(); kk * ohw];
        let mut gx = gx;
        let mut gw = gw;
        for grp in 0..g.spec.groups {
            let gy_g = &gy[grp * g.cout_g() * ohw..(grp + 1) * g.cout_g() * ohw];
            let wrange = grp * g.cout_g() * kk..(grp + 1) * g.cout_g() * kk;
            if let Some(gw) = gw.as_deref_mut() {
                im2col(x, g, grp, &mut col);
                gemm(
                    MatRef::new(gy_g, g.cout_g(), ohw),
                    MatRef::transposed(&col, kk, ohw),
                    &mut gw[wrange.clone()],
                    false,
                    true,
                );
            }
            if let Some(gx) = gx.as_deref_mut() {
                gemm(
                    MatRef::transposed(&w[wrange], g.cout_g(), kk),
                    MatRef::new(gy_g, g.cout_g(), ohw),
                    &mut gcol,
                    false,
                    false,
                );
                col2im_add(&gcol, g, grp, gx);
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, grp: usize, col: &mut [T]) {
    let (s, pad) = (g.spec.stride, g.spec.padding);
    let ohw = g.oh * g.ow;
    for cl in 0..g.cin_g() {
        let ci = grp * g.cin_g() + cl;
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (cl * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                dst.iter_mut().for_each(|v| *v = T::zero());
                let (lo, hi) = ConvGeom::valid_range(g.ow, g.w, kx, pad, s);
                for oy in 0..g.oh {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in lo..hi {
                        drow[ox] = src[ox * s + kx - pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(gcol: &[T], g: &ConvGeom, grp: usize, gx: &mut [T]) {
    let (s, pad) = (g.spec.stride, g.spec.padding);
    let ohw = g.oh * g.ow;
    for cl in 0..g.cin_g() {
        let ci = grp * g.cin_g() + cl;
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (cl * g.kh + ky) * g.kw + kx;
                let src = &gcol[row * ohw..(row + 1) * ohw];
                let (lo, hi) = ConvGeom::valid_range(g.ow, g.w, kx, pad, s);
                for oy in 0..g.oh {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in lo..hi {
                        drow[ox * s + kx - pad] += srow[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (s, pad) = (g.spec.stride, g.spec.padding);
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        let wc = &w[c * kk..(c + 1) * kk];
        let oplane = &mut out[c * ohw..(c + 1) * ohw];
        for oy in 0..g.oh {
            let orow = &mut oplane[oy * g.ow..(oy + 1) * g.ow];
            for ky in 0..g.kh {
                let iy = (oy * s + ky) as isize - pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let irow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                for kx in 0..g.kw {
                    let wv = wc[ky * g.kw + kx];
                    let (lo, hi) = ConvGeom::valid_range(g.ow, g.w, kx, pad, s);
                    if s == 1 {
                        let src = &irow[lo + kx - pad..hi + kx - pad];
                        for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in lo..hi {
                            orow[ox] += wv * irow[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (s, pad) = (g.spec.stride, g.spec.padding);
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        let gplane = &gy[c * ohw..(c + 1) * ohw];
        for oy in 0..g.oh {
            let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
            for ky in 0..g.kh {
                let iy = (oy * s + ky) as isize - pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..g.kw {
                    let (lo, hi) = ConvGeom::valid_range(g.ow, g.w, kx, pad, s);
                    if let Some(gw) = gw.as_deref_mut() {
                        let irow = &plane[iy * g.w..(iy + 1) * g.w];
                        let mut acc = T::zero();
                        for ox in lo..hi {
                            acc += grow[ox] * irow[ox * s + kx - pad];
                        }
                        gw[c * kk + ky * g.kw + kx] += acc;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[c * kk + ky * g.kw + kx];
                        let xrow = &mut gx[c * hw + iy * g.w..c * hw + (iy + 1) * g.w];
                        for ox in lo..hi {
                            xrow[ox * s + kx - pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}
