//! Central finite-difference checks for tape gradients.
//!
//! Numerical derivatives are computed from forward evaluations only, with
//! recording disabled, so they never touch the vector-Jacobian products they
//! are compared against.

use super::{backward, no_grad, Array, Tape, Tensor};
use crate::error::Result;

/// Relative L2 error between two gradient vectors.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric)).max(1e-8);
    diff / scale
}

/// Central differences of the scalar `f` at `inputs`, one vector per input.
pub fn numeric_grads<F>(f: &F, inputs: &[Array], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let _g = no_grad();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[k].numel()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let ts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        let mut a = a.clone();
                        if i == k {
                            a.data_mut()[j] += delta;
                        }
                        Tensor::constant(a)
                    })
                    .collect();
                Ok(f(&ts)?.item())
            };
            *slot = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Tape gradients of the scalar `f` at `inputs`.
pub fn analytic_grads<F>(f: &F, inputs: &[Array]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let y = f(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    Ok(backward(&y, &refs, false)?
        .into_iter()
        .map(|g| g.data().to_vec())
        .collect())
}

/// Worst relative error over all inputs.
pub fn check<F>(f: F, inputs: &[Array], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let a = analytic_grads(&f, inputs)?;
    let n = numeric_grads(&f, inputs, h)?;
    Ok(a.iter()
        .zip(&n)
        .map(|(a, n)| rel_error(a, n))
        .fold(0.0, f64::max))
}
