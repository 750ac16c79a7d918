//! Central finite-difference oracle for analytic gradients.

use crate::autodiff::{GradMode, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Central differences `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every coordinate.
pub fn numerical_gradient<F>(f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest coordinate-wise `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Builds `f` on a fresh tape, differentiates it, and compares against
/// central differences of the same function. Returns the max relative error.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(GradMode::FirstOrder);
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new(GradMode::FirstOrder);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.gradients(out, &vars)?;
    let numeric = numerical_gradient(eval, params, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
