//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward value of the supplied
//! closure, so it is independent of the reverse-mode rules it validates.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst element-wise disagreement found by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a small absolute floor so that near-zero gradient
/// entries are compared at absolute precision.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Compares reverse-mode gradients of `f` at `inputs` with central
/// differences of step `h`. Every input is registered as a parameter.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let analytic = g.grad_tensors(out, &vars)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || !err.is_finite() {
                report = GradCheckReport {
                    max_rel_err: err,
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
