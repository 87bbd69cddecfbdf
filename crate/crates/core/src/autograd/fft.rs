use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::real::Real;

/// In-place unnormalized 2D DFT of a row-major `h x w` complex plane.
/// `inverse` selects the `e^{+i...}` kernel, still without the `1/(h*w)`
/// factor.
pub fn fft2<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len(), h * w);
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(buf);
    let mut t = vec![Complex::new(T::zero(), T::zero()); h * w];
    for r in 0..h {
        for c in 0..w {
            t[c * h + r] = buf[r * w + c];
        }
    }
    col_fft.process(&mut t);
    for r in 0..h {
        for c in 0..w {
            buf[r * w + c] = t[c * h + r];
        }
    }
}
