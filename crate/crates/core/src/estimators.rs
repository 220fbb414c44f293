//! Gradient estimators for gates that backpropagation cannot see through.
//!
//! For a binary gate h with P(h=1) = sigm(a) and per-example loss L, the
//! score-function estimate of dE[L]/da is `(h - sigm(a)) * L`; it is unbiased
//! and stays unbiased when any constant baseline is subtracted from L. The
//! variance-minimizing baseline is the ratio
//! E[(h - sigm(a))^2 L] / E[(h - sigm(a))^2], tracked per unit as two moving
//! averages in [`EstimatorState`].
//!
//! The remaining estimators are biased but cheap: straight-through treats
//! the threshold as the identity on the backward pass (optionally scaled by
//! sigm'(a)), the STS unit backpropagates through its smooth factor with the
//! Bernoulli draw frozen, and the noisy rectifier passes gradient exactly
//! where it fired.

use serde::{Deserialize, Serialize};

use crate::math::{sigm, sigm_deriv};
use crate::units::{StVariant, UnitActivation};
use crate::{Error, Result};

/// Floor under the baseline denominator; below it the baseline is 0.
pub const BASELINE_DENOMINATOR_FLOOR: f64 = 1e-8;

/// Per-unit tracker for the minimum-variance baseline: moving averages of
/// the weighted loss (h - sigm(a))^2 * L and of the weight (h - sigm(a))^2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorState {
    numerator_avg: f64,
    denominator_avg: f64,
    decay: f64,
    count: u64,
}

impl EstimatorState {
    /// `decay` is the moving-average step in (0, 1]; 1 keeps no memory.
    pub fn new(decay: f64) -> Result<EstimatorState> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "baseline decay must be in (0,1], got {decay}"
            )));
        }
        Ok(EstimatorState { numerator_avg: 0.0, denominator_avg: 0.0, decay, count: 0 })
    }

    pub fn update(&mut self, h: f64, a: f64, loss: f64) {
        let d = h - sigm(a);
        let w = d * d;
        self.numerator_avg = (1.0 - self.decay) * self.numerator_avg + self.decay * w * loss;
        self.denominator_avg = (1.0 - self.decay) * self.denominator_avg + self.decay * w;
        self.count += 1;
    }

    /// Current baseline estimate; 0 until the denominator average clears
    /// the floor.
    pub fn baseline(&self) -> f64 {
        if self.denominator_avg > BASELINE_DENOMINATOR_FLOOR {
            self.numerator_avg / self.denominator_avg
        } else {
            0.0
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Uncentered score-function estimate of dE[L]/da: `(h - sigm(a)) * L`.
pub fn reinforce_grad(h: f64, a: f64, loss: f64) -> f64 {
    (h - sigm(a)) * loss
}

/// Centered variant `(h - sigm(a)) * (L - baseline)` with the baseline
/// taken from `state`.
pub fn centered_reinforce_grad(h: f64, a: f64, loss: f64, state: &EstimatorState) -> f64 {
    (h - sigm(a)) * (loss - state.baseline())
}

/// Straight-through backward: the hard threshold is treated as the identity
/// (`Plain`), or as the sigmoid whose derivative scales the gradient
/// (`TimesSigmoidDeriv`).
pub fn straight_through_backward(dl_dh: f64, a: f64, variant: StVariant) -> f64 {
    match variant {
        StVariant::Plain => dl_dh,
        StVariant::TimesSigmoidDeriv => dl_dh * sigm_deriv(a),
    }
}

/// STS backward. With h = b * sqrt(p), p = sigm(a + z), and the draw b
/// frozen, dh/da = b * sqrt(p) * (1 - p) / 2.
pub fn sts_backward(dl_dh: f64, act: &UnitActivation) -> f64 {
    if act.b {
        dl_dh * 0.5 * act.p.sqrt() * (1.0 - act.p)
    } else {
        0.0
    }
}

/// Noisy-rectifier backward: with z frozen, h = max(0, a + z) has slope 1
/// exactly where the unit fired.
pub fn noisy_rectifier_backward(dl_dh: f64, act: &UnitActivation) -> f64 {
    if act.a + act.z > 0.0 {
        dl_dh
    } else {
        0.0
    }
}
