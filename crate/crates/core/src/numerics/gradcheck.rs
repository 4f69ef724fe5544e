//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};

pub const FD_STEP: f64 = 1e-5;

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar-valued op against central
/// differences with step `h` at every coordinate of `point`, returning the
/// largest relative error.
///
/// `op` receives a fresh graph and the input node and must return a
/// single-element node. It is evaluated `2·len + 1` times.
pub fn grad_check_with_step<F>(op: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.input(point.shape().to_vec(), point.data().to_vec(), true)?;
        let y = op(&mut g, x)?;
        if g.value(y).len() != 1 {
            return contract("grad_check op must produce a scalar");
        }
        let mut grads = g.backward(y)?;
        grads.take(x).expect("input requires grad")
    };
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(point.shape().to_vec(), data, false)?;
        let y = op(&mut g, x)?;
        Ok(g.scalar(y))
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        plus[i] += h;
        let mut minus = point.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check_with_step`] at the standard step `h = 1e-5`.
pub fn grad_check<F>(op: F, point: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    grad_check_with_step(op, point, FD_STEP)
}

/// Checks a scalar function of many parameters along a few directions.
///
/// `f(theta)` is re-evaluated at `theta ± h·u` for each direction `u`; the
/// analytic directional derivative is `grad · u`. Returns the worst relative
/// error. Useful when the parameter vector is too large to perturb entrywise.
pub fn directional_check<F>(f: F, grad: &[f64], theta: &[f64], directions: &[Vec<f64>], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for u in directions {
        if u.len() != theta.len() || grad.len() != theta.len() {
            return contract("directional_check: length mismatch");
        }
        let plus: Vec<f64> = theta.iter().zip(u).map(|(t, d)| t + h * d).collect();
        let minus: Vec<f64> = theta.iter().zip(u).map(|(t, d)| t - h * d).collect();
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * h);
        let analytic: f64 = grad.iter().zip(u).map(|(g, d)| g * d).sum();
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
