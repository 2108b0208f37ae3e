//! Central finite-difference gradient checker (64-bit).

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central differences
/// for every coordinate of every input.
///
/// Returns `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
/// `f` may use any error type that tensor errors convert into.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item()?)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
