//! Differentiating an outer loss through a gradient-based update procedure.

use crate::autodiff::{GradMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of [`grad_through_update`].
#[derive(Clone, Debug)]
pub struct UnrolledGrad {
    pub outer_loss: f64,
    pub grads: Vec<Tensor>,
}

/// Gradient of `outer(update(θ))` with respect to `θ`.
///
/// In [`GradMode::ExactUnrolled`] the update is differentiated through,
/// second-order terms included. In [`GradMode::FirstOrder`] the gradients
/// taken inside `update` are constants, so the result is the outer gradient
/// at the adapted parameters, carried straight back to `θ`.
pub fn grad_through_update<U, L>(theta: &[Tensor], mode: GradMode, update: U, outer: L) -> Result<UnrolledGrad>
where
    U: FnOnce(&mut Tape, Vec<Var>) -> Result<Vec<Var>>,
    L: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(mode);
    let vars: Vec<Var> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
    let adapted = update(&mut tape, vars.clone())?;
    let loss = outer(&mut tape, &adapted)?;
    let outer_loss = tape.value(loss).item();
    let grads = tape.gradients(loss, &vars)?;
    Ok(UnrolledGrad { outer_loss, grads })
}

/// `steps` full gradient-descent steps `θ ← θ − lr ∇loss(θ)` recorded on `tape`.
///
/// A non-finite loss aborts with [`Error::Divergence`] naming the step.
pub fn gradient_steps<F>(tape: &mut Tape, mut params: Vec<Var>, steps: usize, lr: f64, mut loss: F) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    for step in 0..steps {
        let l = loss(tape, &params)?;
        let value = tape.value(l).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.grad(l, &params)?;
        params = params
            .iter()
            .zip(grads)
            .map(|(&p, g)| {
                let step = tape.scale(g, -lr)?;
                tape.add(p, step)
            })
            .collect::<Result<_>>()?;
    }
    Ok(params)
}
