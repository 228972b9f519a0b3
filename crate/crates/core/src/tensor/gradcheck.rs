//! Central finite-difference checking of reverse-mode gradients.

use super::{no_grad, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Multiplies every analytic gradient before comparison; anything other
    /// than 1.0 deliberately breaks the check (used to test the detector).
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-6, analytic_scale: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares autodiff gradients of `loss(inputs)` against central differences
/// for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    loss(&params)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let values: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_vec()).collect();
    for (ti, base) in values.iter().enumerate() {
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let perturbed: Vec<Tensor<f64>> = values
                    .iter()
                    .zip(inputs)
                    .enumerate()
                    .map(|(j, (v, t))| {
                        let mut v = v.clone();
                        if j == ti {
                            v[i] += delta;
                        }
                        Tensor::from_vec(v, t.shape())
                    })
                    .collect::<Result<_>>()?;
                no_grad(|| loss(&perturbed))?.item()
            };
            let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            let a = analytic[ti][i] * opts.analytic_scale;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.checked == 1 {
                report = GradCheckReport { max_rel_error: rel, worst: (ti, i), analytic: a, numeric, checked: report.checked };
            }
        }
    }
    Ok(report)
}
