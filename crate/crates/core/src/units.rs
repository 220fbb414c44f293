//! Forward sampling for every gate unit family.
//!
//! All units map a pre-nonlinearity activation `a` to an output `h >= 0`.
//! The stochastic kinds are:
//!
//! * noisy rectifier: `h = max(0, a + z)` with additive noise `z`;
//! * STS (stochastic times smooth): `p = sigm(a)`, `b ~ Bernoulli(sqrt(p))`,
//!   `h = b * sqrt(p)`, so `E[h] = p` and `P(h>0) = sqrt(p)`;
//! * SBN (stochastic binary neuron): `h = 1` with probability `sigm(a)`;
//! * straight-through: sampled exactly like the SBN, distinguished only by
//!   its backward rule.
//!
//! Deterministic baselines: plain rectifier, plain sigmoid, and sigmoid with
//! Gaussian noise added to its input during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigm, softplus, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseKind {
    Logistic,
    Gaussian { sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StVariant {
    /// Backward passes dL/dh through unchanged.
    Plain,
    /// Backward multiplies dL/dh by sigm'(a).
    TimesSigmoidDeriv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UnitKind {
    NoisyRectifier(NoiseKind),
    Sts,
    Sbn,
    StraightThrough(StVariant),
    Rectifier,
    Sigmoid,
    SigmoidWithNoise { sd: f64 },
}

impl UnitKind {
    /// Kinds whose gate probability lives behind a sigmoid; these take the
    /// KL sparsity penalty and may have noise injected before the sigmoid.
    pub fn is_sigmoid_family(&self) -> bool {
        matches!(
            self,
            UnitKind::Sts
                | UnitKind::Sbn
                | UnitKind::StraightThrough(_)
                | UnitKind::Sigmoid
                | UnitKind::SigmoidWithNoise { .. }
        )
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, UnitKind::Rectifier | UnitKind::Sigmoid)
    }

    pub fn name(&self) -> &'static str {
        match self {
            UnitKind::NoisyRectifier(_) => "noisy-rect",
            UnitKind::Sts => "sts",
            UnitKind::Sbn => "sbn",
            UnitKind::StraightThrough(_) => "st",
            UnitKind::Rectifier => "rect",
            UnitKind::Sigmoid => "sigmoid",
            UnitKind::SigmoidWithNoise { .. } => "sigmoid-noise",
        }
    }
}

impl std::fmt::Display for UnitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything sampled during one unit's forward pass, kept so the backward
/// pass replays decisions instead of resampling them.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitActivation {
    /// Pre-nonlinearity activation.
    pub a: f64,
    /// Additive noise sample (0 when the kind has none).
    pub z: f64,
    /// Sigmoid of the noisy input, for sigmoid-family kinds (0 otherwise).
    pub p: f64,
    /// Bernoulli draw, for kinds that threshold one.
    pub b: bool,
    /// Unit output.
    pub h: f64,
}

pub fn noisy_rectifier_forward(a: f64, noise: NoiseKind, rng: &mut RngStream) -> UnitActivation {
    let z = match noise {
        NoiseKind::Logistic => rng.logistic(),
        NoiseKind::Gaussian { sd } => rng.gaussian(0.0, sd),
    };
    UnitActivation { a, z, p: 0.0, b: false, h: (a + z).max(0.0) }
}

pub fn rectifier_forward(a: f64) -> UnitActivation {
    UnitActivation { a, z: 0.0, p: 0.0, b: false, h: a.max(0.0) }
}

pub fn sts_forward(a: f64, rng: &mut RngStream) -> UnitActivation {
    let p = sigm(a);
    let sp = p.sqrt();
    let b = rng.bernoulli(sp);
    UnitActivation { a, z: 0.0, p, b, h: if b { sp } else { 0.0 } }
}

pub fn sbn_forward(a: f64, rng: &mut RngStream) -> UnitActivation {
    let p = sigm(a);
    let b = rng.bernoulli(p);
    UnitActivation { a, z: 0.0, p, b, h: if b { 1.0 } else { 0.0 } }
}

pub fn sigmoid_forward(a: f64) -> UnitActivation {
    let p = sigm(a);
    UnitActivation { a, z: 0.0, p, b: false, h: p }
}

/// Sample any unit kind. `injected` is additive pre-nonlinearity noise from
/// the layer's noise model (0 when none); kinds with their own noise source
/// draw it here on top.
pub fn sample_unit(kind: &UnitKind, a: f64, injected: f64, rng: &mut RngStream) -> UnitActivation {
    match *kind {
        UnitKind::NoisyRectifier(noise) => {
            debug_assert_eq!(injected, 0.0, "rectifier kinds take no injected noise");
            noisy_rectifier_forward(a, noise, rng)
        }
        UnitKind::Rectifier => rectifier_forward(a),
        UnitKind::Sts => {
            let mut act = sts_forward(a + injected, rng);
            act.a = a;
            act.z = injected;
            act
        }
        UnitKind::Sbn | UnitKind::StraightThrough(_) => {
            let mut act = sbn_forward(a + injected, rng);
            act.a = a;
            act.z = injected;
            act
        }
        UnitKind::Sigmoid => {
            let mut act = sigmoid_forward(a + injected);
            act.a = a;
            act.z = injected;
            act
        }
        UnitKind::SigmoidWithNoise { sd } => {
            let z = injected + rng.gaussian(0.0, sd);
            let mut act = sigmoid_forward(a + z);
            act.a = a;
            act.z = z;
            act
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitStatistics {
    pub mean: f64,
    pub p_active: f64,
}

/// Closed-form mean and activation probability, for the kinds that have
/// them: the logistic-noise rectifier (mean softplus(a), active sigm(a)),
/// STS (mean sigm(a), active sqrt(sigm(a))), and SBN (both sigm(a)).
pub fn unit_statistics(kind: &UnitKind, a: f64) -> Result<UnitStatistics> {
    match kind {
        UnitKind::NoisyRectifier(NoiseKind::Logistic) => {
            Ok(UnitStatistics { mean: softplus(a), p_active: sigm(a) })
        }
        UnitKind::Sts => {
            let p = sigm(a);
            Ok(UnitStatistics { mean: p, p_active: p.sqrt() })
        }
        UnitKind::Sbn => {
            let p = sigm(a);
            Ok(UnitStatistics { mean: p, p_active: p })
        }
        other => Err(Error::UnsupportedKind(format!(
            "{other} has no closed-form statistics"
        ))),
    }
}

/// Exact E[f(h)] for an STS unit, using its two-atom distribution
/// {0, sqrt(p)} with P(h = sqrt(p)) = sqrt(p).
pub fn sts_expect(a: f64, f: impl Fn(f64) -> f64) -> f64 {
    let sp = sigm(a).sqrt();
    sp * f(sp) + (1.0 - sp) * f(0.0)
}

/// The deterministic value a unit reports at test time, before
/// thresholding; pooled by threshold calibration.
pub fn gate_value(kind: &UnitKind, a: f64, noise_mean: f64) -> f64 {
    match kind {
        UnitKind::NoisyRectifier(_) | UnitKind::Rectifier => (a + noise_mean).max(0.0),
        UnitKind::Sts => sigm(a + noise_mean).sqrt(),
        _ => sigm(a + noise_mean),
    }
}

/// Test-time output. Stochastic draws are replaced by the kind's
/// deterministic value; with a calibrated threshold, values at or below it
/// are zeroed (binary kinds emit exactly 0 or 1).
pub fn deterministic_output(
    kind: &UnitKind,
    a: f64,
    noise_mean: f64,
    threshold: Option<f64>,
) -> f64 {
    let v = gate_value(kind, a, noise_mean);
    match (kind, threshold) {
        (UnitKind::NoisyRectifier(_) | UnitKind::Rectifier, Some(t)) => {
            if v > t {
                v
            } else {
                0.0
            }
        }
        (UnitKind::NoisyRectifier(_) | UnitKind::Rectifier, None) => v,
        (UnitKind::Sts, Some(t)) => {
            if v > t {
                v
            } else {
                0.0
            }
        }
        // unthresholded STS reports its mean, p
        (UnitKind::Sts, None) => v * v,
        (_, Some(t)) => {
            if v > t {
                1.0
            } else {
                0.0
            }
        }
        (_, None) => v,
    }
}
