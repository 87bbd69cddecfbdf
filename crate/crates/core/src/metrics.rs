//! Image quality metrics on `(C, H, W)` tensors.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Returned for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(x_hat, x)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian window; the 2-D window is its outer product.
pub fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// window positions, data range 1, averaged over channels.
pub fn ssim<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    x_hat.check_same_shape(x)?;
    let (c, h, w) = x.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = ssim_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = x_hat.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64().unwrap()).collect();
        let b: Vec<f64> = x.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64().unwrap()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let aa = filter_valid(&prod(&a, &a), h, w, &k);
        let bb = filter_valid(&prod(&b, &b), h, w, &k);
        let ab = filter_valid(&prod(&a, &b), h, w, &k);
        let n = mu_a.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / n as f64;
    }
    Ok(total / c as f64)
}
