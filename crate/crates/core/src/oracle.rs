//! Exact references for small stochastic-gate problems.
//!
//! A problem holds parameters `theta`, a differentiable map from `theta` to
//! per-unit pre-activations `a`, and a smooth loss over the gate vector `h`.
//! With k binary gates and P(h_i = 1) = sigm(a_i) independently, every
//! expectation is a sum over the 2^k configurations, so estimator means and
//! variances can be computed exactly and compared against Monte Carlo runs
//! and finite differences. Everything here is the measuring stick; nothing
//! here is used by training itself.

use crate::error::{Error, Result};
use crate::math::{sigm, sigm_deriv, RngStream};

pub const MAX_ENUM_UNITS: usize = 20;

pub struct EnumerableProblem {
    theta: Vec<f64>,
    activation: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    loss: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    k: usize,
}

/// One sampled (or enumerated) gate configuration as seen by an estimator.
pub struct GateSample<'a> {
    /// Gate outputs, each 0.0 or 1.0.
    pub h: &'a [f64],
    /// Pre-sigmoid activations.
    pub a: &'a [f64],
    /// Loss at `h`.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorStats {
    pub mean: f64,
    pub variance: f64,
    pub se: f64,
    pub n: usize,
}

impl EnumerableProblem {
    pub fn new(
        theta: Vec<f64>,
        activation: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        loss: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<EnumerableProblem> {
        let k = activation(&theta).len();
        if k == 0 || k > MAX_ENUM_UNITS {
            return Err(Error::InvalidParameter(format!(
                "enumerable problems support 1..={MAX_ENUM_UNITS} units, got {k}"
            )));
        }
        Ok(EnumerableProblem { theta, activation: Box::new(activation), loss: Box::new(loss), k })
    }

    /// Problem whose pre-activations are the parameters themselves.
    pub fn from_activations(
        a: Vec<f64>,
        loss: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<EnumerableProblem> {
        EnumerableProblem::new(a, |t| t.to_vec(), loss)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        let k = (self.activation)(&theta).len();
        if k != self.k {
            return Err(Error::DimensionMismatch(format!(
                "theta change altered unit count {} -> {k}",
                self.k
            )));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn activations(&self) -> Vec<f64> {
        (self.activation)(&self.theta)
    }

    pub fn loss_at(&self, h: &[f64]) -> f64 {
        (self.loss)(h)
    }
}

fn for_each_config(a: &[f64], mut visit: impl FnMut(&[f64], f64)) {
    let k = a.len();
    let probs: Vec<f64> = a.iter().map(|&ai| sigm(ai)).collect();
    let mut h = vec![0.0; k];
    for mask in 0..(1usize << k) {
        let mut prob = 1.0;
        for (j, &pj) in probs.iter().enumerate() {
            if mask >> j & 1 == 1 {
                h[j] = 1.0;
                prob *= pj;
            } else {
                h[j] = 0.0;
                prob *= 1.0 - pj;
            }
        }
        visit(&h, prob);
    }
}

/// E[L(h)] by full enumeration.
pub fn exact_expected_loss(p: &EnumerableProblem) -> f64 {
    let a = p.activations();
    let mut total = 0.0;
    for_each_config(&a, |h, prob| total += prob * p.loss_at(h));
    total
}

/// d E[L(h)] / d a_unit, exactly:
/// sigm'(a_i) * E over the other units of [L(h | h_i=1) - L(h | h_i=0)].
pub fn exact_grad(p: &EnumerableProblem, unit: usize) -> f64 {
    let a = p.activations();
    assert!(unit < a.len(), "unit {unit} out of range");
    let others: Vec<f64> =
        a.iter().enumerate().filter(|(j, _)| *j != unit).map(|(_, &v)| v).collect();
    let mut diff = 0.0;
    let mut h_full = vec![0.0; a.len()];
    for_each_config(&others, |h_others, prob| {
        let mut oi = 0;
        for j in 0..a.len() {
            if j != unit {
                h_full[j] = h_others[oi];
                oi += 1;
            }
        }
        h_full[unit] = 1.0;
        let l1 = p.loss_at(&h_full);
        h_full[unit] = 0.0;
        let l0 = p.loss_at(&h_full);
        diff += prob * (l1 - l0);
    });
    sigm_deriv(a[unit]) * diff
}

/// Exact mean and variance of an estimator under the gate distribution,
/// by full enumeration.
pub fn exact_estimator_moments(
    p: &EnumerableProblem,
    estimator: &mut dyn FnMut(&GateSample) -> f64,
) -> (f64, f64) {
    let a = p.activations();
    let mut mean = 0.0;
    let mut second = 0.0;
    for_each_config(&a, |h, prob| {
        let g = estimator(&GateSample { h, a: &a, loss: p.loss_at(h) });
        mean += prob * g;
        second += prob * g * g;
    });
    (mean, second - mean * mean)
}

/// Sample mean, variance, and standard error of an estimator over `n`
/// independent gate draws.
pub fn mc_estimator_stats(
    p: &EnumerableProblem,
    n: usize,
    rng: &mut RngStream,
    estimator: &mut dyn FnMut(&GateSample) -> f64,
) -> EstimatorStats {
    assert!(n > 1);
    let a = p.activations();
    let probs: Vec<f64> = a.iter().map(|&ai| sigm(ai)).collect();
    let mut h = vec![0.0; a.len()];
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for t in 0..n {
        for (hj, &pj) in h.iter_mut().zip(&probs) {
            *hj = if rng.bernoulli(pj) { 1.0 } else { 0.0 };
        }
        let g = estimator(&GateSample { h: &h, a: &a, loss: p.loss_at(&h) });
        let delta = g - mean;
        mean += delta / (t + 1) as f64;
        m2 += delta * (g - mean);
    }
    let variance = m2 / (n - 1) as f64;
    EstimatorStats { mean, variance, se: (variance / n as f64).sqrt(), n }
}

/// Central finite difference of `f` along coordinate `i` at `x`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[i] += eps;
    lo[i] -= eps;
    (f(&hi) - f(&lo)) / (2.0 * eps)
}
