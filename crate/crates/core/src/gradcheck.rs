//! Central finite-difference gradient checking.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Checks at most this many evenly strided coordinates per input.
    pub max_coords_per_input: Option<usize>,
    /// Seed of the fixed random cotangent that contracts non-scalar outputs.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords_per_input: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Coordinates of input `len` that will be perturbed.
pub fn checked_coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let step = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * step) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

fn cotangent(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn scalar_value(out: &Var<f64>, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Analytic gradients of `<r, f(inputs)>` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>], seed: u64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::param(t.clone())).collect();
    let out = f(&vars)?;
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient check forward output".into()));
    }
    let grads = out.backward_with_seed(cotangent(out.numel(), seed))?;
    Ok(vars.iter().map(|v| grads.get_or_zeros(v)).collect())
}

/// Central-difference gradients of `<r, f(inputs)>` at the selected coordinates.
pub fn numeric_gradients<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<Vec<Vec<(usize, f64)>>>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let mut weights: Option<Vec<f64>> = None;
    let mut eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = ins.iter().map(|t| Var::constant(t.clone())).collect();
        let out = f(&vars)?;
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient check perturbed forward".into()));
        }
        let w = weights.get_or_insert_with(|| cotangent(out.numel(), opts.seed));
        Ok(scalar_value(&out, w))
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut coords = Vec::new();
        for i in checked_coords(inputs[k].numel(), opts.max_coords_per_input) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            coords.push((i, (plus - minus) / (2.0 * opts.eps)));
        }
        result.push(coords);
    }
    Ok(result)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<(usize, f64)>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for &(i, nv) in n {
            let e = relative_error(a[i], nv);
            report.checked += 1;
            if e > report.max_rel_err || e.is_nan() {
                report.max_rel_err = e;
                report.worst = (k, i);
            }
        }
    }
    report
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` over all inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {}", opts.eps)));
    }
    let analytic = analytic_gradients(&f, inputs, opts.seed)?;
    let numeric = numeric_gradients(&f, inputs, &opts)?;
    Ok(compare(&analytic, &numeric))
}
