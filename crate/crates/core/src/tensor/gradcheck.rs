//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so these helpers are an
//! independent check on [`Graph::backward`](super::Graph::backward).

use super::{Graph, Result, Tensor, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between two gradients, `|a - b| / max(|a|, |b|, 1e-8)` in the 2-norm.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(1e-8)
}

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numerical_gradient(
    inputs: &[Tensor],
    which: usize,
    step: f64,
    f: &dyn Fn(&[Tensor]) -> f64,
) -> Tensor {
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let up = f(&work);
        work[which].data_mut()[i] = orig - step;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Builds the loss with every input as a parameter, runs backward, and
/// returns `(analytic, numerical)` gradients per input.
pub fn compare<F>(inputs: &[Tensor], step: f64, build: F) -> Result<Vec<(Tensor, Tensor)>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).expect("forward failed during finite differences");
        g.value(loss).data()[0]
    };
    Ok(vars
        .iter()
        .enumerate()
        .map(|(i, v)| (grads.get(*v), numerical_gradient(inputs, i, step, &eval)))
        .collect())
}

/// Worst relative error over all inputs, see [`compare`].
pub fn max_relative_error<F>(inputs: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(compare(inputs, step, build)?
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
