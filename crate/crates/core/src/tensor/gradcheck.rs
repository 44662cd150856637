use super::{Tape, Tensor, Var};
use crate::error::{MuseError, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the max over coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_vars(|vars| f(vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant of [`grad_check`]; checks every input.
pub fn grad_check_vars<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.leaf(v)).collect();
        let out = f(&vars)?;
        if out.value().numel() != 1 {
            return Err(MuseError::contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .map(|v| tape.leaf(&v.clone().with_grad()))
            .collect();
        let out = f(&vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
