use std::rc::Rc;

use rustfft::num_complex::Complex;

use super::conv::ConvGeom;
use super::{conv2d_backward, conv2d_forward, fft2, Conv2dSpec, GradSink, Node, Op, Var};
use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{fmt_shape, numel};

const L2_EPS: f64 = 1e-12;

fn same_shape<T: Real>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {} vs {}",
            fmt_shape(a.shape()),
            fmt_shape(b.shape())
        )));
    }
    Ok(())
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn conv_geom(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<ConvGeom> {
    let (cin, h, w) = match xs[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d input must be (C,H,W), got {}",
                fmt_shape(xs)
            )))
        }
    };
    let (cout, cin_g, kh, kw) = match ws[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d weight must be (Cout,Cin/groups,kh,kw), got {}",
                fmt_shape(ws)
            )))
        }
    };
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::Config(format!(
            "conv2d groups {g} must divide Cin {cin} and Cout {cout}"
        )));
    }
    if cin_g * g != cin {
        return Err(Error::Shape(format!(
            "conv2d weight {} expects {} input channels, got {cin}",
            fmt_shape(ws),
            cin_g * g
        )));
    }
    if spec.stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {}",
            spec.padding
        )));
    }
    Ok(ConvGeom {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: (h + 2 * spec.padding - kh) / spec.stride + 1,
        ow: (w + 2 * spec.padding - kw) / spec.stride + 1,
        spec,
    })
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a + *b).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Self::from_parts(self.shape().to_vec(), data, rg, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a - *b).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Self::from_parts(self.shape().to_vec(), data, rg, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a * *b).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Self::from_parts(self.shape().to_vec(), data, rg, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let data = self.data().iter().map(|a| *a * c).collect();
        Self::from_parts(self.shape().to_vec(), data, self.requires_grad(), Op::Scale(self.clone(), c))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(&self, s: &Var<T>) -> Result<Var<T>> {
        if s.numel() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a single-element factor, got {}",
                fmt_shape(s.shape())
            )));
        }
        let c = s.item();
        let data = self.data().iter().map(|a| *a * c).collect();
        let rg = self.requires_grad() || s.requires_grad();
        Ok(Self::from_parts(self.shape().to_vec(), data, rg, Op::ScaleBy(self.clone(), s.clone())))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<T> {
        let data = self.data().iter().map(|&a| gelu(a)).collect();
        Self::from_parts(self.shape().to_vec(), data, self.requires_grad(), Op::Gelu(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {}",
                fmt_shape(self.shape()),
                fmt_shape(shape)
            )));
        }
        Ok(Self::from_parts(
            shape.to_vec(),
            self.data().to_vec(),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Var<T>> {
        let lead = self.shape()[0];
        if len == 0 || start + len > lead {
            return Err(Error::Shape(format!(
                "narrow {start}..{} out of range for leading dim {lead}",
                start + len
            )));
        }
        let inner = self.numel() / lead;
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let offset = start * inner;
        let data = self.data()[offset..offset + len * inner].to_vec();
        Ok(Self::from_parts(shape, data, self.requires_grad(), Op::Narrow { x: self.clone(), offset }))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::Shape(format!(
                    "concat: trailing dims {} vs {}",
                    fmt_shape(&p.shape()[1..]),
                    fmt_shape(tail)
                )));
            }
            lead += p.shape()[0];
        }
        let mut shape = first.shape().to_vec();
        shape[0] = lead;
        let mut data = Vec::with_capacity(numel(&shape));
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(Self::from_parts(shape, data, rg, Op::Concat(parts.to_vec())))
    }

    /// `out[i] = self[index[i]]`, reshaped to `shape`. The index must be a
    /// permutation or selection of the flattened input.
    pub fn gather(&self, shape: &[usize], index: Rc<Vec<u32>>) -> Result<Var<T>> {
        if numel(shape) != index.len() {
            return Err(Error::Shape(format!(
                "gather index has {} entries for shape {}",
                index.len(),
                fmt_shape(shape)
            )));
        }
        let src = self.data();
        let data = index.iter().map(|&i| src[i as usize]).collect();
        Ok(Self::from_parts(
            shape.to_vec(),
            data,
            self.requires_grad(),
            Op::Gather { x: self.clone(), index },
        ))
    }

    /// `op(self) * op(b)` where `op` optionally transposes a stored matrix.
    pub fn matmul_t(&self, b: &Var<T>, ta: bool, tb: bool) -> Result<Var<T>> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = b.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {} x {} (ta={ta}, tb={tb})",
                fmt_shape(self.shape()),
                fmt_shape(b.shape())
            )));
        }
        let am = if ta { MatRef::transposed(self.data(), ar, ac) } else { MatRef::new(self.data(), ar, ac) };
        let bm = if tb { MatRef::transposed(b.data(), br, bc) } else { MatRef::new(b.data(), br, bc) };
        let mut out = vec![T::zero(); m * n];
        gemm(am, bm, &mut out, false, false);
        let rg = self.requires_grad() || b.requires_grad();
        Ok(Self::from_parts(
            vec![m, n],
            out,
            rg,
            Op::MatMul { a: self.clone(), b: b.clone(), ta, tb },
        ))
    }

    pub fn matmul(&self, b: &Var<T>) -> Result<Var<T>> {
        self.matmul_t(b, false, false)
    }

    pub fn conv2d(&self, w: &Var<T>, spec: Conv2dSpec) -> Result<Var<T>> {
        let g = conv_geom(self.shape(), w.shape(), spec)?;
        let out = conv2d_forward(self.data(), w.data(), &g);
        let rg = self.requires_grad() || w.requires_grad();
        Ok(Self::from_parts(
            vec![g.cout, g.oh, g.ow],
            out,
            rg,
            Op::Conv2d { x: self.clone(), w: w.clone(), spec },
        ))
    }

    /// Normalizes the channel vector at every spatial position to zero mean
    /// and unit variance, then applies a per-channel affine map.
    pub fn layer_norm_channels(&self, scale: &Var<T>, shift: &Var<T>, eps: T) -> Result<Var<T>> {
        let c = self.shape()[0];
        if self.shape().len() < 2 || scale.numel() != c || shift.numel() != c {
            return Err(Error::Shape(format!(
                "layer_norm_channels: input {}, scale {}, shift {}",
                fmt_shape(self.shape()),
                fmt_shape(scale.shape()),
                fmt_shape(shift.shape())
            )));
        }
        let p = self.numel() / c;
        let x = self.data();
        let inv_c = T::one() / T::lit(c as f64);
        let mut mean = vec![T::zero(); p];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&x[ch * p..(ch + 1) * p]) {
                *m += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            for ((s, v), m) in var.iter_mut().zip(&x[ch * p..(ch + 1) * p]).zip(&mean) {
                let d = *v - *m;
                *s += d * d;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v * inv_c + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); c * p];
        let mut out = vec![T::zero(); c * p];
        let (sc, sh) = (scale.data(), shift.data());
        for ch in 0..c {
            for i in 0..p {
                let h = (x[ch * p + i] - mean[i]) * inv_std[i];
                xhat[ch * p + i] = h;
                out[ch * p + i] = h * sc[ch] + sh[ch];
            }
        }
        let rg = self.requires_grad() || scale.requires_grad() || shift.requires_grad();
        Ok(Self::from_parts(
            self.shape().to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x: self.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
            },
        ))
    }

    /// Scales each row of a matrix to unit L2 norm (`x / max(|x|, 1e-12)`).
    pub fn l2_normalize_rows(&self) -> Result<Var<T>> {
        let (r, n) = self.dims2()?;
        let eps = T::lit(L2_EPS);
        let x = self.data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * n];
        for i in 0..r {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let d = norm.max(eps);
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = *v / d;
            }
            norms.push(norm);
        }
        Ok(Self::from_parts(
            vec![r, n],
            out,
            self.requires_grad(),
            Op::L2NormRows { x: self.clone(), norms },
        ))
    }

    pub fn softmax_rows(&self) -> Result<Var<T>> {
        let (r, n) = self.dims2()?;
        let x = self.data();
        let mut out = vec![T::zero(); r * n];
        for i in 0..r {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = T::zero();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (*v - mx).exp();
                sum += *o;
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        Ok(Self::from_parts(vec![r, n], out, self.requires_grad(), Op::SoftmaxRows(self.clone())))
    }

    pub fn sum_all(&self) -> Var<T> {
        let s = self.data().iter().copied().sum::<T>();
        Self::from_parts(vec![1], vec![s], self.requires_grad(), Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Var<T> {
        let s = self.data().iter().copied().sum::<T>() / T::lit(self.numel() as f64);
        Self::from_parts(vec![1], vec![s], self.requires_grad(), Op::MeanAll(self.clone()))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&self, target: &Var<T>) -> Result<Var<T>> {
        same_shape(self, target, "l1_loss")?;
        let s = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b).abs())
            .sum::<T>()
            / T::lit(self.numel() as f64);
        let rg = self.requires_grad() || target.requires_grad();
        Ok(Self::from_parts(vec![1], vec![s], rg, Op::L1Loss(self.clone(), target.clone())))
    }

    /// Mean modulus of the per-channel unnormalized 2D DFT of `self - target`
    /// over all `C*H*W` coefficients.
    pub fn fft_l1_loss(&self, target: &Var<T>) -> Result<Var<T>> {
        same_shape(self, target, "fft_loss")?;
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        let mut unit = Vec::with_capacity(c * plane);
        let mut total = T::zero();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
        for ch in 0..c {
            let a = &self.data()[ch * plane..(ch + 1) * plane];
            let b = &target.data()[ch * plane..(ch + 1) * plane];
            for ((z, x), y) in buf.iter_mut().zip(a).zip(b) {
                *z = Complex::new(*x - *y, T::zero());
            }
            fft2(&mut buf, h, w, false);
            for z in &buf {
                let m = z.norm();
                total += m;
                unit.push(if m > T::zero() { *z / m } else { Complex::new(T::zero(), T::zero()) });
            }
        }
        let loss = total / T::lit((c * plane) as f64);
        let rg = self.requires_grad() || target.requires_grad();
        Ok(Self::from_parts(
            vec![1],
            vec![loss],
            rg,
            Op::FftL1 {
                a: self.clone(),
                b: target.clone(),
                unit: if rg { unit } else { Vec::new() },
            },
        ))
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * *s;
    }
}

pub(super) fn backward_node<T: Real>(node: &Node<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = sink.buf(a) {
                axpy(ga, g, T::one());
            }
            if let Some(gb) = sink.buf(b) {
                axpy(gb, g, T::one());
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = sink.buf(a) {
                axpy(ga, g, T::one());
            }
            if let Some(gb) = sink.buf(b) {
                axpy(gb, g, -T::one());
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = sink.buf(a) {
                for ((d, gv), bv) in ga.iter_mut().zip(g).zip(b.data()) {
                    *d += *gv * *bv;
                }
            }
            if let Some(gb) = sink.buf(b) {
                for ((d, gv), av) in gb.iter_mut().zip(g).zip(a.data()) {
                    *d += *gv * *av;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = sink.buf(x) {
                axpy(gx, g, *c);
            }
        }
        Op::ScaleBy(x, s) => {
            if let Some(gx) = sink.buf(x) {
                axpy(gx, g, s.item());
            }
            if let Some(gs) = sink.buf(s) {
                gs[0] += g.iter().zip(x.data()).map(|(a, b)| *a * *b).sum::<T>();
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = sink.buf(x) {
                for ((d, gv), xv) in gx.iter_mut().zip(g).zip(x.data()) {
                    *d += *gv * gelu_grad(*xv);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = sink.buf(x) {
                axpy(gx, g, T::one());
            }
        }
        Op::Narrow { x, offset } => {
            if let Some(gx) = sink.buf(x) {
                axpy(&mut gx[*offset..*offset + g.len()], g, T::one());
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let n = p.numel();
                if let Some(gp) = sink.buf(p) {
                    axpy(gp, &g[off..off + n], T::one());
                }
                off += n;
            }
        }
        Op::Gather { x, index } => {
            if let Some(gx) = sink.buf(x) {
                for (gv, &i) in g.iter().zip(index.iter()) {
                    gx[i as usize] += *gv;
                }
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (ar, ac) = (a.shape()[0], a.shape()[1]);
            let (br, bc) = (b.shape()[0], b.shape()[1]);
            let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
            let n = if *tb { br } else { bc };
            let gm = MatRef::new(g, m, n);
            if let Some(ga) = sink.buf(a) {
                // d op(A) = g * op(B)^T
                let bt = if *tb { MatRef::new(b.data(), br, bc) } else { MatRef::transposed(b.data(), br, bc) };
                gemm(gm, bt, ga, *ta, true);
            }
            if let Some(gb) = sink.buf(b) {
                // d op(B) = op(A)^T * g
                let at = if *ta { MatRef::new(a.data(), ar, ac) } else { MatRef::transposed(a.data(), ar, ac) };
                gemm(at, gm, gb, *tb, true);
            }
            let _ = k;
        }
        Op::Conv2d { x, w, spec } => {
            let geom = conv_geom(x.shape(), w.shape(), *spec).expect("validated in forward");
            let (xd, wd) = (x.data(), w.data());
            let gx = sink.buf(x).map(std::mem::take);
            let gw = sink.buf(w).map(std::mem::take);
            let (mut gx, mut gw) = (gx, gw);
            conv2d_backward(xd, wd, g, &geom, gx.as_deref_mut(), gw.as_deref_mut());
            if let (Some(v), Some(buf)) = (gx, sink.buf(x)) {
                *buf = v;
            }
            if let (Some(v), Some(buf)) = (gw, sink.buf(w)) {
                *buf = v;
            }
        }
        Op::LayerNorm { x, scale, shift, xhat, inv_std } => {
            let c = x.shape()[0];
            let p = x.numel() / c;
            if let Some(gs) = sink.buf(scale) {
                for ch in 0..c {
                    gs[ch] += g[ch * p..(ch + 1) * p]
                        .iter()
                        .zip(&xhat[ch * p..(ch + 1) * p])
                        .map(|(a, b)| *a * *b)
                        .sum::<T>();
                }
            }
            if let Some(gb) = sink.buf(shift) {
                for ch in 0..c {
                    gb[ch] += g[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
                }
            }
            if let Some(gx) = sink.buf(x) {
                let sc = scale.data();
                let inv_c = T::one() / T::lit(c as f64);
                let mut mean_d = vec![T::zero(); p];
                let mut mean_dx = vec![T::zero(); p];
                for ch in 0..c {
                    for i in 0..p {
                        let d = g[ch * p + i] * sc[ch];
                        mean_d[i] += d;
                        mean_dx[i] += d * xhat[ch * p + i];
                    }
                }
                for ch in 0..c {
                    for i in 0..p {
                        let d = g[ch * p + i] * sc[ch];
                        gx[ch * p + i] += inv_std[i]
                            * (d - mean_d[i] * inv_c - xhat[ch * p + i] * mean_dx[i] * inv_c);
                    }
                }
            }
        }
        Op::L2NormRows { x, norms } => {
            if let Some(gx) = sink.buf(x) {
                let n = x.shape()[1];
                let eps = T::lit(L2_EPS);
                for (i, &norm) in norms.iter().enumerate() {
                    let gr = &g[i * n..(i + 1) * n];
                    let yr = &node.data[i * n..(i + 1) * n];
                    let dst = &mut gx[i * n..(i + 1) * n];
                    if norm > eps {
                        let dot = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<T>();
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += (*gv - *yv * dot) / norm;
                        }
                    } else {
                        axpy(dst, gr, T::one() / eps);
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            if let Some(gx) = sink.buf(x) {
                let n = x.shape()[1];
                for (i, yr) in node.data.chunks_exact(n).enumerate() {
                    let gr = &g[i * n..(i + 1) * n];
                    let dot = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<T>();
                    for ((d, gv), yv) in gx[i * n..(i + 1) * n].iter_mut().zip(gr).zip(yr) {
                        *d += *yv * (*gv - dot);
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = sink.buf(x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanAll(x) => {
            if let Some(gx) = sink.buf(x) {
                let s = g[0] / T::lit(x.numel() as f64);
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::L1Loss(a, b) => {
            let s = g[0] / T::lit(a.numel() as f64);
            let sign = |d: T| if d > T::zero() { s } else if d < T::zero() { -s } else { T::zero() };
            if let Some(ga) = sink.buf(a) {
                for ((d, x), y) in ga.iter_mut().zip(a.data()).zip(b.data()) {
                    *d += sign(*x - *y);
                }
            }
            if let Some(gb) = sink.buf(b) {
                for ((d, x), y) in gb.iter_mut().zip(a.data()).zip(b.data()) {
                    *d -= sign(*x - *y);
                }
            }
        }
        Op::FftL1 { a, b, unit } => {
            // dL/dd_n = Re(sum_k u_k e^{+i theta_kn}) / M, with u = D/|D|.
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let plane = h * w;
            let s = g[0] / T::lit((c * plane) as f64);
            let mut grad = vec![T::zero(); c * plane];
            let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
            for ch in 0..c {
                buf.copy_from_slice(&unit[ch * plane..(ch + 1) * plane]);
                fft2(&mut buf, h, w, true);
                for (d, z) in grad[ch * plane..(ch + 1) * plane].iter_mut().zip(&buf) {
                    *d = z.re * s;
                }
            }
            if let Some(ga) = sink.buf(a) {
                axpy(ga, &grad, T::one());
            }
            if let Some(gb) = sink.buf(b) {
                axpy(gb, &grad, -T::one());
            }
        }
    }
}
