//! Pre-sigmoid noise injection.
//!
//! The Beta noise source is skewed toward inactivity: given the shape
//! parameter beta and the sparsity target s, alpha is solved from the mode
//! equation (alpha - 1) / (alpha + beta - 2) = s, and raw samples in (0,1)
//! are multiplied by `logit(s) / s` so the distribution's mode lands exactly
//! where the sigmoid outputs s. That factor is negative, pushing gates
//! toward silence. At test time the sample is replaced by the scaled
//! distribution mean, making evaluation deterministic.

use serde::{Deserialize, Serialize};

use crate::math::{logit, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaNoiseSpec {
    pub alpha: f64,
    pub beta: f64,
    pub scale: f64,
    pub test_time_value: f64,
}

/// Solve for alpha so the Beta(alpha, beta) mode equals `s`, and fix the
/// sample scale so the scaled mode is `logit(s)`.
pub fn derive_beta_params(beta: f64, s: f64) -> Result<BetaNoiseSpec> {
    if !(beta > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta must be > 1 for the mode to exist, got {beta}"
        )));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("sparsity target {s} not in (0,1)")));
    }
    let alpha = (1.0 - 2.0 * s + s * beta) / (1.0 - s);
    let scale = logit(s) / s;
    let test_time_value = scale * alpha / (alpha + beta);
    Ok(BetaNoiseSpec { alpha, beta, scale, test_time_value })
}

impl BetaNoiseSpec {
    /// Mode of the raw (unscaled) distribution.
    pub fn raw_mode(&self) -> f64 {
        (self.alpha - 1.0) / (self.alpha + self.beta - 2.0)
    }

    /// One scaled draw: `scale * Beta(alpha, beta)`.
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let x = sample_gamma(self.alpha, rng);
        let y = sample_gamma(self.beta, rng);
        self.scale * (x / (x + y))
    }
}

/// Deterministic replacement used at evaluation: the scaled mean
/// `scale * alpha / (alpha + beta)`.
pub fn test_time_noise(spec: &BetaNoiseSpec) -> f64 {
    spec.test_time_value
}

/// Gamma(shape, 1) sampling for shape >= 1 (Marsaglia-Tsang squeeze).
fn sample_gamma(shape: f64, rng: &mut RngStream) -> f64 {
    debug_assert!(shape >= 1.0, "gamma sampler requires shape >= 1, got {shape}");
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.gaussian(0.0, 1.0);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.next_f64();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

/// A layer's noise source for gate pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateNoise {
    None,
    Gaussian { sd: f64 },
    Beta(BetaNoiseSpec),
}

impl GateNoise {
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match self {
            GateNoise::None => 0.0,
            GateNoise::Gaussian { sd } => rng.gaussian(0.0, *sd),
            GateNoise::Beta(spec) => spec.sample(rng),
        }
    }

    /// The deterministic value substituted at test time (the mean).
    pub fn test_time_value(&self) -> f64 {
        match self {
            GateNoise::None | GateNoise::Gaussian { .. } => 0.0,
            GateNoise::Beta(spec) => test_time_noise(spec),
        }
    }
}
