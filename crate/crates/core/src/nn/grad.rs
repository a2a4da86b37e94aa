use crate::error::{Error, Result};

use super::network::Network;

/// A scalar function of a network that can report its own gradient with
/// respect to the flat parameter vector.
///
/// Implementations typically run a batched forward pass, form the derivative
/// of the loss with respect to the outputs and hand it to
/// [`Network::backward`].
pub trait Objective {
    /// Returns the objective value and accumulates its gradient into `grad`
    /// (which the caller zeroes beforehand).
    fn value_and_grad(&self, net: &Network, grad: &mut [f64]) -> Result<f64>;

    fn value(&self, net: &Network) -> Result<f64> {
        let mut scratch = vec![0.0; net.num_params()];
        self.value_and_grad(net, &mut scratch)
    }
}

/// Adapts a closure into an [`Objective`].
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&Network, &mut [f64]) -> Result<f64>,
{
    fn value_and_grad(&self, net: &Network, grad: &mut [f64]) -> Result<f64> {
        (self.0)(net, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientRequest {
    pub active_mask: Vec<bool>,
}

impl GradientRequest {
    pub fn all(n: usize) -> Self {
        Self {
            active_mask: vec![true; n],
        }
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            active_mask: mask.to_vec(),
        }
    }
}

/// Gradient of `objective` at `net`, zeroed outside the active mask.
pub fn grad_logdensity(
    net: &Network,
    objective: &dyn Objective,
    request: &GradientRequest,
) -> Result<(f64, Vec<f64>)> {
    let n = net.num_params();
    if request.active_mask.len() != n {
        return Err(Error::dims("gradient mask", n, request.active_mask.len()));
    }
    let mut grad = vec![0.0; n];
    let value = objective.value_and_grad(net, &mut grad)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            value,
            theta: net.theta().to_vec(),
        });
    }
    for (g, &active) in grad.iter_mut().zip(&request.active_mask) {
        if !active {
            *g = 0.0;
        }
    }
    Ok((value, grad))
}

/// Central finite-difference gradient, the test oracle for every analytic
/// gradient in the crate. Step `h = 1e-5 * max(1, |theta_i|)`.
pub fn finite_difference_grad(
    net: &Network,
    objective: &dyn Objective,
    mask: &[bool],
) -> Result<Vec<f64>> {
    let mut work = net.clone();
    let mut out = vec![0.0; net.num_params()];
    for i in 0..net.num_params() {
        if !mask[i] {
            continue;
        }
        let t = net.theta()[i];
        let h = 1e-5 * t.abs().max(1.0);
        work.theta_mut()[i] = t + h;
        let up = objective.value(&work)?;
        work.theta_mut()[i] = t - h;
        let down = objective.value(&work)?;
        work.theta_mut()[i] = t;
        out[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}
