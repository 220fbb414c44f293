//! Sparsity penalties and the two controllers that keep gate activity near
//! its target: a multiplicative lambda adapter driven by measured sparsity,
//! and a bias-revival rule for units that stop firing.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which penalty a layer trains under: KL for sigmoid-family gates, L1 for
/// rectifier gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyMode {
    Kl,
    L1,
}

#[derive(Debug, Clone)]
pub struct PenaltyResult {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when any input had to be clamped into the KL domain.
    pub clamped: bool,
}

const KL_CLAMP: f64 = 1e-7;

/// `-lambda * sum_i (s ln p_i + (1-s) ln(1-p_i))`, minimized when every
/// p_i equals the target s. Inputs outside (0,1) are clamped to
/// [1e-7, 1-1e-7] and flagged.
pub fn kl_penalty(p: &[f64], s: f64, lambda: f64) -> PenaltyResult {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    let mut clamped = false;
    for &pi_raw in p {
        let pi = if pi_raw < KL_CLAMP || pi_raw > 1.0 - KL_CLAMP || !pi_raw.is_finite() {
            clamped = true;
            pi_raw.clamp(KL_CLAMP, 1.0 - KL_CLAMP)
        } else {
            pi_raw
        };
        value -= lambda * (s * pi.ln() + (1.0 - s) * (1.0 - pi).ln());
        grad.push(-lambda * (s / pi - (1.0 - s) / (1.0 - pi)));
    }
    PenaltyResult { value, grad, clamped }
}

/// `lambda * sum_i |p_i|` with subgradient 0 at exactly 0.
pub fn l1_penalty(p: &[f64], lambda: f64) -> PenaltyResult {
    let value = lambda * p.iter().map(|v| v.abs()).sum::<f64>();
    let grad = p.iter().map(|&v| lambda * sign0(v)).collect();
    PenaltyResult { value, grad, clamped: false }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adaptive penalty strength. Lambda moves multiplicatively whenever the
/// measured sparsity s_e leaves the band around the target.
///
/// `target` is the firing fraction the controller regulates; `penalty_target`
/// is the activation probability the KL term pulls toward. They differ for
/// units whose firing probability is not their activation probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityController {
    pub mode: PenaltyMode,
    pub target: f64,
    pub penalty_target: f64,
    pub lambda: f64,
    pub band: f64,
    pub lambda_step: f64,
}

impl SparsityController {
    pub fn new(
        mode: PenaltyMode,
        target: f64,
        lambda0: f64,
        band: f64,
        lambda_step: f64,
    ) -> Result<SparsityController> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::InvalidParameter(format!("sparsity target {target} not in (0,1)")));
        }
        if !(lambda0 >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda0 {lambda0} must be >= 0")));
        }
        if !(band > 0.0) {
            return Err(Error::InvalidParameter(format!("band {band} must be > 0")));
        }
        if !(lambda_step > 1.0) {
            return Err(Error::InvalidParameter(format!("lambda step {lambda_step} must be > 1")));
        }
        Ok(SparsityController {
            mode,
            target,
            penalty_target: target,
            lambda: lambda0,
            band,
            lambda_step,
        })
    }

    /// Point the KL term at a different activation probability than the
    /// regulated firing fraction.
    pub fn with_penalty_target(mut self, penalty_target: f64) -> Result<SparsityController> {
        if !(penalty_target > 0.0 && penalty_target < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "penalty target {penalty_target} not in (0,1)"
            )));
        }
        self.penalty_target = penalty_target;
        Ok(self)
    }

    /// One controller step given the measured fraction of nonzero gates.
    pub fn adapt(&mut self, s_e: f64) {
        if s_e > self.target + self.band {
            self.lambda *= self.lambda_step;
        } else if s_e < self.target - self.band {
            self.lambda /= self.lambda_step;
        }
    }

    pub fn penalty(&self, p: &[f64]) -> PenaltyResult {
        match self.mode {
            PenaltyMode::Kl => kl_penalty(p, self.penalty_target, self.lambda),
            PenaltyMode::L1 => l1_penalty(p, self.lambda),
        }
    }
}

/// Per-unit moving average of being nonzero, plus the revival rule that
/// pushes a dead unit's bias up until it fires again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiringRateState {
    avg: Vec<f64>,
    decay: f64,
    revival_threshold: f64,
    bias_step: f64,
}

impl FiringRateState {
    pub fn new(
        units: usize,
        initial: f64,
        decay: f64,
        revival_threshold: f64,
        bias_step: f64,
    ) -> Result<FiringRateState> {
        if !(0.0..=1.0).contains(&initial) {
            return Err(Error::InvalidParameter(format!("initial rate {initial} not in [0,1]")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidParameter(format!("firing decay {decay} not in (0,1)")));
        }
        Ok(FiringRateState { avg: vec![initial; units], decay, revival_threshold, bias_step })
    }

    /// Fold one batch's per-unit firing fractions into the moving averages.
    pub fn update(&mut self, batch_rates: &[f64]) {
        debug_assert_eq!(batch_rates.len(), self.avg.len());
        for (a, &r) in self.avg.iter_mut().zip(batch_rates) {
            *a = self.decay * *a + (1.0 - self.decay) * r;
        }
    }

    pub fn averages(&self) -> &[f64] {
        &self.avg
    }

    /// Mean firing rate across units, a smoothed effective sparsity.
    pub fn mean(&self) -> f64 {
        if self.avg.is_empty() {
            return 0.0;
        }
        self.avg.iter().sum::<f64>() / self.avg.len() as f64
    }

    /// Push up the bias of every unit whose average is below the revival
    /// threshold. Returns how many were revived. Biases never decrease.
    pub fn revive_dead_units(&self, biases: &mut [f64]) -> usize {
        debug_assert_eq!(biases.len(), self.avg.len());
        let mut revived = 0;
        for (b, &a) in biases.iter_mut().zip(&self.avg) {
            if a < self.revival_threshold {
                *b += self.bias_step;
                revived += 1;
            }
        }
        revived
    }
}
