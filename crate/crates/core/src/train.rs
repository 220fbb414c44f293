//! SGD training of the gated model: momentum, max-norm weight constraints,
//! per-path learning rates, sparsity control, per-unit loss baselines for
//! the score-function estimator, dead-unit revival, and early stopping on
//! validation error.
//!
//! The task gradient reaches expert columns only through fired gates; the
//! sparsity penalty reaches every gate through its analytic dependence on
//! the activation probability (KL) or through the gate output (L1).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::estimators::{
    centered_reinforce_grad, noisy_rectifier_backward, reinforce_grad, straight_through_backward,
    sts_backward, EstimatorState,
};
use crate::math::{label, Matrix, RngStream};
use crate::network::{
    calibrate_threshold, GatedModel, MacCount, Mode, ThresholdCalibration,
};
use crate::sparsity::{FiringRateState, PenaltyMode, SparsityController};
use crate::units::UnitKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_main: f64,
    pub lr_gater: f64,
    pub momentum: f64,
    pub max_norm: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_main: 0.1,
            lr_gater: 0.1,
            momentum: 0.0,
            max_norm: 2.0,
            batch: 32,
            epochs: 50,
            patience: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0) {
            return Err(Error::Config(format!("lr_main {} must be > 0", self.lr_main)));
        }
        if !(self.lr_gater >= 0.0) {
            return Err(Error::Config(format!("lr_gater {} must be >= 0", self.lr_gater)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0,1)", self.momentum)));
        }
        if !(self.max_norm > 0.0) {
            return Err(Error::Config(format!("max_norm {} must be > 0", self.max_norm)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSettings {
    pub optimizer: OptimizerConfig,
    pub penalty: Option<PenaltyMode>,
    pub target_sparsity: f64,
    pub lambda0: f64,
    pub sparsity_band: f64,
    pub lambda_step: f64,
    pub baseline_decay: f64,
    pub firing_decay: f64,
    pub revival_threshold: f64,
    pub revival_step: f64,
    /// Feed the penalty into the per-example loss signal seen by the
    /// score-function estimator (the penalty does not depend on the sampled
    /// gates, so this only shifts the baseline, not the expected gradient).
    pub penalty_in_loss_signal: bool,
    /// Center the score-function estimator with the tracked per-unit
    /// baseline. Off means raw (h - p) * L.
    pub reinforce_baseline: bool,
    pub sparse_execution: bool,
    /// Calibrate the test-time threshold on the validation pool each epoch.
    pub calibrate: bool,
    pub seed: u64,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        TrainerSettings {
            optimizer: OptimizerConfig::default(),
            penalty: None,
            target_sparsity: 0.1,
            lambda0: 1.0,
            sparsity_band: 0.01,
            lambda_step: 1.1,
            baseline_decay: 0.01,
            firing_decay: 0.99,
            revival_threshold: 0.02,
            revival_step: 0.05,
            penalty_in_loss_signal: true,
            reinforce_baseline: true,
            sparse_execution: true,
            calibrate: false,
            seed: 0,
        }
    }
}

/// Penalty modes are tied to unit families: KL needs an activation
/// probability, L1 needs a non-negative gate output.
pub fn check_kind_penalty(kind: &UnitKind, penalty: Option<PenaltyMode>) -> Result<()> {
    match penalty {
        Some(PenaltyMode::Kl) if !kind.is_sigmoid_family() => Err(Error::Config(format!(
            "KL penalty needs a sigmoid-family unit kind, got {kind}"
        ))),
        Some(PenaltyMode::L1)
            if !matches!(kind, UnitKind::NoisyRectifier(_) | UnitKind::Rectifier) =>
        {
            Err(Error::Config(format!("L1 penalty needs a rectifier unit kind, got {kind}")))
        }
        _ => Ok(()),
    }
}

/// v <- momentum*v - lr*g; p <- p + v. Rejects non-finite gradients before
/// touching any state.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!("non-finite gradient {g}")));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Rescale any column (one unit's incoming weights) whose Euclidean norm
/// exceeds `max_norm` back onto the constraint sphere.
pub fn max_norm_project(w: &mut Matrix, max_norm: f64) {
    debug_assert!(max_norm > 0.0);
    let (rows, cols) = (w.rows(), w.cols());
    for j in 0..cols {
        let mut sq = 0.0;
        for r in 0..rows {
            let v = w.get(r, j);
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for r in 0..rows {
                w.set(r, j, w.get(r, j) * scale);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CeLoss {
    pub mean: f64,
    pub per_example: Vec<f64>,
    /// d(mean loss)/d(logits), batch factor included.
    pub dlogits: Matrix,
}

/// Softmax cross-entropy over logit rows, numerically stable under large
/// magnitudes.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u8]) -> Result<CeLoss> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::DimensionMismatch(format!("{} logit rows vs {} labels", b, labels.len())));
    }
    let mut per_example = Vec::with_capacity(b);
    let mut dlogits = Matrix::zeros(b, c);
    let inv_b = 1.0 / b as f64;
    for e in 0..b {
        let y = labels[e] as usize;
        if y >= c {
            return Err(Error::InvalidParameter(format!("label {y} outside {c} classes")));
        }
        let row = logits.row(e);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        per_example.push(lse - row[y]);
        let drow = dlogits.row_mut(e);
        for (j, &v) in row.iter().enumerate() {
            drow[j] = (v - lse).exp() * inv_b;
        }
        drow[y] -= inv_b;
    }
    let mean = per_example.iter().sum::<f64>() * inv_b;
    Ok(CeLoss { mean, per_example, dlogits })
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, &v) in s.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    s
}

/// One buffer per trainable tensor, used for both gradients and momentum.
#[derive(Debug, Clone)]
struct Buffers {
    gw1: Matrix,
    gb1: Vec<f64>,
    gw2: Matrix,
    gb2: Vec<f64>,
    ew: Matrix,
    eb: Vec<f64>,
    ow: Matrix,
    ob: Vec<f64>,
}

impl Buffers {
    fn zeros_like(m: &GatedModel) -> Buffers {
        Buffers {
            gw1: Matrix::zeros(m.layer.gater_w1.rows(), m.layer.gater_w1.cols()),
            gb1: vec![0.0; m.layer.gater_b1.len()],
            gw2: Matrix::zeros(m.layer.gater_w2.rows(), m.layer.gater_w2.cols()),
            gb2: vec![0.0; m.layer.gater_b2.len()],
            ew: Matrix::zeros(m.layer.expert_w.rows(), m.layer.expert_w.cols()),
            eb: vec![0.0; m.layer.expert_b.len()],
            ow: Matrix::zeros(m.out_w.rows(), m.out_w.cols()),
            ob: vec![0.0; m.out_b.len()],
        }
    }

    fn is_finite(&self) -> bool {
        self.gw1.is_finite()
            && self.gw2.is_finite()
            && self.ew.is_finite()
            && self.ow.is_finite()
            && self.gb1.iter().chain(&self.gb2).chain(&self.eb).chain(&self.ob).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_error: f64,
    pub s_e: f64,
    pub lambda: f64,
    pub expert_macs_sparse: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_valid_error: f64,
    pub stopped_early: bool,
}

pub const REPORT_CSV_HEADER: &str =
    "epoch,train_loss,valid_error,s_e,lambda,expert_macs_sparse,wall_ms";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.valid_error, r.s_e, r.lambda, r.expert_macs_sparse,
                r.wall_ms
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub error_rate: f64,
    pub mean_loss: f64,
    pub s_e: f64,
    pub macs: MacCount,
}

/// Deterministic evaluation: test-mode forward, argmax prediction.
pub fn evaluate(model: &GatedModel, data: &Dataset, batch: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Ok(EvalResult {
            error_rate: 0.0,
            mean_loss: 0.0,
            s_e: 0.0,
            macs: MacCount::default(),
        });
    }
    let rng = RngStream::new(0, 0);
    let d = data.dim();
    let mut wrong = 0usize;
    let mut loss_sum = 0.0;
    let mut nonzero = 0usize;
    let mut gate_count = 0usize;
    let mut macs = MacCount::default();
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch.max(1)).min(data.len());
        let bs = end - start;
        let mut x = Matrix::zeros(bs, d);
        for r in 0..bs {
            x.row_mut(r).copy_from_slice(data.inputs.row(start + r));
        }
        let labels = &data.labels[start..end];
        let fwd = model.forward(&x, Mode::Test, &rng, &[], true)?;
        let ce = softmax_cross_entropy(&fwd.logits, labels)?;
        loss_sum += ce.mean * bs as f64;
        let preds = crate::network::predictions(&fwd.logits);
        wrong += preds.iter().zip(labels).filter(|(p, &y)| **p != y as usize).count();
        nonzero += fwd.layer.gater.gates.data().iter().filter(|&&v| v != 0.0).count();
        gate_count += fwd.layer.gater.gates.data().len();
        macs.accumulate(&fwd.macs);
        start = end;
    }
    Ok(EvalResult {
        error_rate: wrong as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
        s_e: nonzero as f64 / gate_count as f64,
        macs,
    })
}

pub struct Trainer {
    pub model: GatedModel,
    pub settings: TrainerSettings,
    pub controller: Option<SparsityController>,
    pub baselines: Vec<EstimatorState>,
    pub firing: FiringRateState,
    velocity: Buffers,
    shuffle_root: RngStream,
    gates_root: RngStream,
    step: u64,
    adapt_interval: u64,
    epoch: usize,
    kl_clamp_events: u64,
}

impl Trainer {
    pub fn new(model: GatedModel, settings: TrainerSettings) -> Result<Trainer> {
        settings.optimizer.validate()?;
        model.validate().map_err(|e| Error::Config(format!("model invalid: {e}")))?;
        check_kind_penalty(&model.layer.kind, settings.penalty)?;
        let controller = settings
            .penalty
            .map(|mode| {
                let ctrl = SparsityController::new(
                    mode,
                    settings.target_sparsity,
                    settings.lambda0,
                    settings.sparsity_band,
                    settings.lambda_step,
                )?;
                // an STS gate fires with probability sqrt(p), so a firing
                // target s means pulling p toward s^2
                if matches!(model.layer.kind, UnitKind::Sts) {
                    ctrl.with_penalty_target(settings.target_sparsity * settings.target_sparsity)
                } else {
                    Ok(ctrl)
                }
            })
            .transpose()?;
        let n = model.layer.n();
        let baselines = vec![EstimatorState::new(settings.baseline_decay)?; n];
        let firing = FiringRateState::new(
            n,
            settings.target_sparsity,
            settings.firing_decay,
            settings.revival_threshold,
            settings.revival_step,
        )?;
        let velocity = Buffers::zeros_like(&model);
        // lambda moves once per firing-EMA time constant; adapting every
        // batch against a sensor with ~1/(1-decay) batches of lag makes the
        // loop oscillate by orders of magnitude
        let adapt_interval = (1.0 / (1.0 - settings.firing_decay)).round().max(1.0) as u64;
        let seed = settings.seed;
        Ok(Trainer {
            model,
            settings,
            controller,
            baselines,
            firing,
            velocity,
            shuffle_root: RngStream::new(seed, label("shuffle")),
            gates_root: RngStream::new(seed, label("gates")),
            step: 0,
            adapt_interval,
            epoch: 0,
            kl_clamp_events: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.controller.as_ref().map_or(0.0, |c| c.lambda)
    }

    pub fn kl_clamp_events(&self) -> u64 {
        self.kl_clamp_events
    }

    /// Calibrate the test-time threshold on up to `cap` examples.
    pub fn calibrate(&mut self, data: &Dataset, cap: usize) -> Result<ThresholdCalibration> {
        let n = data.len().min(cap);
        let d = data.dim();
        let mut x = Matrix::zeros(n, d);
        for r in 0..n {
            x.row_mut(r).copy_from_slice(data.inputs.row(r));
        }
        let pooled = self.model.layer.pooled_gate_values(&x)?;
        let cal = calibrate_threshold(&pooled, self.settings.target_sparsity)?;
        self.model.layer.threshold = Some(cal.threshold);
        Ok(cal)
    }

    /// One pass over the training data in shuffled batches.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochRow> {
        let t0 = Instant::now();
        self.epoch += 1;
        if data.is_empty() {
            return Ok(EpochRow {
                epoch: self.epoch,
                train_loss: 0.0,
                valid_error: 0.0,
                s_e: 0.0,
                lambda: self.lambda(),
                expert_macs_sparse: 0,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
        let mut indices: Vec<usize> = (0..data.len()).collect();
        self.shuffle_root.derive(self.epoch as u64).shuffle(&mut indices);

        let d = data.dim();
        let mut loss_sum = 0.0;
        let mut nonzero = 0usize;
        let mut gate_count = 0usize;
        let mut macs_sparse = 0u64;

        for chunk in indices.chunks(self.settings.optimizer.batch) {
            let bs = chunk.len();
            let mut x = Matrix::zeros(bs, d);
            let mut labels = Vec::with_capacity(bs);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(data.inputs.row(i));
                labels.push(data.labels[i]);
            }
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let batch_rng = self.gates_root.derive(self.step);
            let loss = self.train_batch(&x, &labels, &ids, &batch_rng)?;
            loss_sum += loss.batch_loss * bs as f64;
            nonzero += loss.nonzero_gates;
            gate_count += bs * self.model.layer.n();
            macs_sparse += loss.macs.expert_macs_sparse;
            self.step += 1;
        }

        Ok(EpochRow {
            epoch: self.epoch,
            train_loss: loss_sum / data.len() as f64,
            valid_error: 0.0,
            s_e: nonzero as f64 / gate_count as f64,
            lambda: self.lambda(),
            expert_macs_sparse: macs_sparse,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Full loop: per-epoch training, threshold calibration, validation,
    /// early stopping with patience, best-model restore.
    pub fn run(&mut self, train: &Dataset, valid: &Dataset) -> Result<TrainReport> {
        let epochs = self.settings.optimizer.epochs;
        let patience = self.settings.optimizer.patience;
        let mut rows = Vec::with_capacity(epochs);
        let mut best_error = f64::INFINITY;
        let mut best_epoch = 0usize;
        let mut best_model = self.model.clone();
        let mut stopped_early = false;
        for _ in 0..epochs {
            let t0 = Instant::now();
            let mut row = self.train_epoch(train)?;
            if self.settings.calibrate && !valid.is_empty() {
                self.calibrate(valid, 10_000)?;
            }
            let eval = evaluate(&self.model, valid, 256)?;
            row.valid_error = eval.error_rate;
            row.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            rows.push(row);
            if eval.error_rate < best_error {
                best_error = eval.error_rate;
                best_epoch = self.epoch;
                best_model = self.model.clone();
            } else if self.epoch - best_epoch >= patience {
                stopped_early = true;
                break;
            }
        }
        self.model = best_model;
        Ok(TrainReport {
            rows,
            best_epoch,
            best_valid_error: best_error,
            stopped_early,
        })
    }

    fn train_batch(
        &mut self,
        x: &Matrix,
        labels: &[u8],
        ids: &[u64],
        batch_rng: &RngStream,
    ) -> Result<BatchOutcome> {
        let bs = x.rows();
        let n = self.model.layer.n();
        let fwd = self.model.forward(
            x,
            Mode::Train,
            batch_rng,
            ids,
            self.settings.sparse_execution,
        )?;
        let ce = softmax_cross_entropy(&fwd.logits, labels)?;
        let gates = &fwd.layer.gater.gates;
        let acts = &fwd.layer.gater.acts;
        let inv_b = 1.0 / bs as f64;

        // readout gradients
        let mut grads = Buffers::zeros_like(&self.model);
        grads.ow = fwd.layer.out.matmul_tn(&ce.dlogits)?;
        grads.ob = column_sums(&ce.dlogits);
        let dl_dout = ce.dlogits.matmul_nt(&self.model.out_w)?;

        // penalty: value, gate-output channel, and probability channel
        let mut penalty_value = 0.0;
        let mut l1_grad: Option<Vec<f64>> = None;
        let mut kl_grad: Option<Vec<f64>> = None;
        if let Some(ctrl) = &self.controller {
            match ctrl.mode {
                PenaltyMode::L1 => {
                    let pen = ctrl.penalty(gates.data());
                    penalty_value = pen.value * inv_b;
                    l1_grad = Some(pen.grad);
                }
                PenaltyMode::Kl => {
                    let mut p_mean = vec![0.0; n];
                    for e in 0..bs {
                        for (pm, act) in p_mean.iter_mut().zip(&acts[e * n..(e + 1) * n]) {
                            *pm += act.p;
                        }
                    }
                    for pm in p_mean.iter_mut() {
                        *pm *= inv_b;
                    }
                    let pen = ctrl.penalty(&p_mean);
                    penalty_value = pen.value;
                    if pen.clamped {
                        self.kl_clamp_events += 1;
                    }
                    kl_grad = Some(pen.grad);
                }
            }
        }
        let batch_loss = ce.mean + penalty_value;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "batch loss {batch_loss} (task {}, penalty {penalty_value})",
                ce.mean
            )));
        }

        // expert-path gradients, restricted to fired gates
        let mut dl_dh = Matrix::zeros(bs, n);
        let mut nonzero_gates = 0usize;
        for e in 0..bs {
            let xrow = x.row(e);
            for j in 0..n {
                let h = gates.get(e, j);
                if h == 0.0 {
                    continue;
                }
                nonzero_gates += 1;
                let go = dl_dout.get(e, j);
                dl_dh.set(e, j, go * fwd.layer.expert.get(e, j));
                let dh_big = go * h;
                for (k, &xv) in xrow.iter().enumerate() {
                    let cur = grads.ew.get(k, j);
                    grads.ew.set(k, j, cur + xv * dh_big);
                }
                grads.eb[j] += dh_big;
            }
        }
        if let Some(l1) = &l1_grad {
            for e in 0..bs {
                for j in 0..n {
                    let g = l1[e * n + j];
                    if g != 0.0 {
                        let cur = dl_dh.get(e, j);
                        dl_dh.set(e, j, cur + g * inv_b);
                    }
                }
            }
        }

        // gate pre-activation gradients, by estimator family
        let mut da = Matrix::zeros(bs, n);
        match self.model.layer.kind {
            UnitKind::Sbn => {
                for e in 0..bs {
                    let loss_signal = ce.per_example[e]
                        + if self.settings.penalty_in_loss_signal { penalty_value } else { 0.0 };
                    for j in 0..n {
                        let act = &acts[e * n + j];
                        let a_eff = act.a + act.z;
                        let g = if self.settings.reinforce_baseline {
                            centered_reinforce_grad(act.h, a_eff, loss_signal, &self.baselines[j])
                        } else {
                            reinforce_grad(act.h, a_eff, loss_signal)
                        };
                        da.set(e, j, g * inv_b);
                    }
                }
                // baselines move only after the whole batch used the frozen ones
                for e in 0..bs {
                    let loss_signal = ce.per_example[e]
                        + if self.settings.penalty_in_loss_signal { penalty_value } else { 0.0 };
                    for j in 0..n {
                        let act = &acts[e * n + j];
                        self.baselines[j].update(act.h, act.a + act.z, loss_signal);
                    }
                }
            }
            UnitKind::StraightThrough(variant) => {
                for e in 0..bs {
                    for j in 0..n {
                        let act = &acts[e * n + j];
                        da.set(
                            e,
                            j,
                            straight_through_backward(dl_dh.get(e, j), act.a + act.z, variant),
                        );
                    }
                }
            }
            UnitKind::Sts => {
                for e in 0..bs {
                    for j in 0..n {
                        let act = &acts[e * n + j];
                        da.set(e, j, sts_backward(dl_dh.get(e, j), act));
                    }
                }
            }
            UnitKind::NoisyRectifier(_) | UnitKind::Rectifier => {
                for e in 0..bs {
                    for j in 0..n {
                        let act = &acts[e * n + j];
                        da.set(e, j, noisy_rectifier_backward(dl_dh.get(e, j), act));
                    }
                }
            }
            UnitKind::Sigmoid | UnitKind::SigmoidWithNoise { .. } => {
                for e in 0..bs {
                    for j in 0..n {
                        let p = acts[e * n + j].p;
                        da.set(e, j, dl_dh.get(e, j) * p * (1.0 - p));
                    }
                }
            }
        }
        if let Some(kl) = &kl_grad {
            for e in 0..bs {
                for j in 0..n {
                    let p = acts[e * n + j].p;
                    let cur = da.get(e, j);
                    da.set(e, j, cur + kl[j] * p * (1.0 - p) * inv_b);
                }
            }
        }

        // gater backprop through the tanh bottleneck
        grads.gw2 = fwd.layer.gater.hidden.matmul_tn(&da)?;
        grads.gb2 = column_sums(&da);
        let mut dhidden = da.matmul_nt(&self.model.layer.gater_w2)?;
        for (dh, &t) in dhidden.data_mut().iter_mut().zip(fwd.layer.gater.hidden.data()) {
            *dh *= 1.0 - t * t;
        }
        grads.gw1 = x.matmul_tn(&dhidden)?;
        grads.gb1 = column_sums(&dhidden);

        if !grads.is_finite() {
            return Err(Error::Diverged("non-finite gradient in batch".into()));
        }
        self.apply(&grads)?;

        // controllers observe the batch after the parameter step
        let mut rates = vec![0.0; n];
        for e in 0..bs {
            for (r, &h) in rates.iter_mut().zip(&gates.data()[e * n..(e + 1) * n]) {
                if h != 0.0 {
                    *r += inv_b;
                }
            }
        }
        self.firing.update(&rates);
        if let Some(ctrl) = &mut self.controller {
            // adapt on the smoothed rate, not the raw 32-example batch
            // fraction, and only once per EMA time constant
            if (self.step + 1) % self.adapt_interval == 0 {
                ctrl.adapt(self.firing.mean());
            }
            self.firing.revive_dead_units(&mut self.model.layer.gater_b2);
        }

        Ok(BatchOutcome { batch_loss, nonzero_gates, macs: fwd.macs })
    }

    fn apply(&mut self, g: &Buffers) -> Result<()> {
        let o = self.settings.optimizer;
        let m = &mut self.model;
        sgd_momentum_step(m.layer.gater_w1.data_mut(), g.gw1.data(), self.velocity.gw1.data_mut(), o.lr_gater, o.momentum)?;
        sgd_momentum_step(&mut m.layer.gater_b1, &g.gb1, &mut self.velocity.gb1, o.lr_gater, o.momentum)?;
        sgd_momentum_step(m.layer.gater_w2.data_mut(), g.gw2.data(), self.velocity.gw2.data_mut(), o.lr_gater, o.momentum)?;
        sgd_momentum_step(&mut m.layer.gater_b2, &g.gb2, &mut self.velocity.gb2, o.lr_gater, o.momentum)?;
        sgd_momentum_step(m.layer.expert_w.data_mut(), g.ew.data(), self.velocity.ew.data_mut(), o.lr_main, o.momentum)?;
        sgd_momentum_step(&mut m.layer.expert_b, &g.eb, &mut self.velocity.eb, o.lr_main, o.momentum)?;
        sgd_momentum_step(m.out_w.data_mut(), g.ow.data(), self.velocity.ow.data_mut(), o.lr_main, o.momentum)?;
        sgd_momentum_step(&mut m.out_b, &g.ob, &mut self.velocity.ob, o.lr_main, o.momentum)?;
        max_norm_project(&mut m.layer.gater_w1, o.max_norm);
        max_norm_project(&mut m.layer.gater_w2, o.max_norm);
        max_norm_project(&mut m.layer.expert_w, o.max_norm);
        max_norm_project(&mut m.out_w, o.max_norm);
        Ok(())
    }
}

struct BatchOutcome {
    batch_loss: f64,
    nonzero_gates: usize,
    macs: MacCount,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_clusters;
    use crate::noise::GateNoise;

    fn small_model(kind: UnitKind, d: usize, n: usize, classes: usize, seed: u64) -> GatedModel {
        GatedModel::new_random(
            d,
            (n / 2).max(1),
            n,
            classes,
            kind,
            GateNoise::None,
            1.0,
            &RngStream::new(seed, label("model")),
        )
        .unwrap()
    }

    #[test]
    fn plain_sgd_moves_against_the_gradient() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![-0.1]);
    }

    #[test]
    fn zero_gradient_coasts_on_momentum() {
        let mut p = vec![0.0];
        let mut v = vec![0.5];
        sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 0.9).unwrap();
        assert!((p[0] - 0.45).abs() < 1e-15);
        assert!((v[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn momentum_compounds_displacement() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        let step1 = p[0];
        let before = p[0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        let step2 = p[0] - before;
        assert!((step2 / step1 - 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.1, 0.2];
        let err = sgd_momentum_step(&mut p, &[0.0, f64::NAN], &mut v, 0.1, 0.9);
        assert!(matches!(err, Err(Error::Diverged(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(v, vec![0.1, 0.2]);
    }

    #[test]
    fn max_norm_rescales_only_oversized_columns() {
        let mut w = Matrix::from_vec(2, 2, vec![3.0, 0.6, 4.0, 0.8]).unwrap();
        max_norm_project(&mut w, 2.0);
        assert!((w.get(0, 0) - 1.2).abs() < 1e-15);
        assert!((w.get(1, 0) - 1.6).abs() < 1e-15);
        let norm0 = (w.get(0, 0).powi(2) + w.get(1, 0).powi(2)).sqrt();
        assert!((norm0 - 2.0).abs() < 1e-12);
        // second column had norm 1 and must be untouched bitwise
        assert_eq!(w.get(0, 1), 0.6);
        assert_eq!(w.get(1, 1), 0.8);
    }

    #[test]
    fn max_norm_ignores_zero_columns_and_bounds_all() {
        let mut w = Matrix::zeros(3, 2);
        max_norm_project(&mut w, 2.0);
        assert!(w.data().iter().all(|&v| v == 0.0));

        let mut rng = RngStream::new(3, label("norms"));
        let mut w = Matrix::from_fn(5, 7, |_, _| rng.gaussian(0.0, 3.0));
        max_norm_project(&mut w, 2.0);
        for j in 0..7 {
            let norm: f64 = (0..5).map(|r| w.get(r, j).powi(2)).sum::<f64>().sqrt();
            assert!(norm <= 2.0 + 1e-12, "column {j} norm {norm}");
        }
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        let logits = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((ce.mean - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ce.dlogits.get(0, 0) + 0.5).abs() < 1e-15);
        assert!((ce.dlogits.get(0, 1) - 0.5).abs() < 1e-15);

        let big = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let easy = softmax_cross_entropy(&big, &[0]).unwrap();
        assert!(easy.mean.abs() < 1e-12);
        let hard = softmax_cross_entropy(&big, &[1]).unwrap();
        assert!((hard.per_example[0] - 1000.0).abs() < 1e-9);
        assert!(hard.mean.is_finite());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Matrix::from_vec(2, 3, vec![0.3, -0.1, 0.7, 1.2, 0.0, -0.5]).unwrap();
        let labels = [2u8, 0u8];
        let ce = softmax_cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for e in 0..2 {
            for j in 0..3 {
                let mut up = logits.clone();
                up.set(e, j, up.get(e, j) + eps);
                let mut dn = logits.clone();
                dn.set(e, j, dn.get(e, j) - eps);
                let fd = (softmax_cross_entropy(&up, &labels).unwrap().mean
                    - softmax_cross_entropy(&dn, &labels).unwrap().mean)
                    / (2.0 * eps);
                assert!((ce.dlogits.get(e, j) - fd).abs() < 1e-8, "({e},{j})");
            }
        }
    }

    #[test]
    fn empty_dataset_changes_nothing() {
        let model = small_model(UnitKind::Sbn, 4, 6, 3, 1);
        let snapshot = model.clone();
        let mut trainer = Trainer::new(model, TrainerSettings::default()).unwrap();
        let empty = Dataset::new(Matrix::zeros(0, 4), vec![], 3).unwrap();
        let row = trainer.train_epoch(&empty).unwrap();
        assert_eq!(row.train_loss, 0.0);
        assert_eq!(row.expert_macs_sparse, 0);
        assert_eq!(trainer.model, snapshot);
    }

    #[test]
    fn straight_through_solves_a_separable_problem() {
        let data = synth_gaussian_clusters(80, 2, 6, 8.0, 21).unwrap();
        let model = small_model(
            UnitKind::StraightThrough(crate::units::StVariant::TimesSigmoidDeriv),
            6,
            8,
            2,
            2,
        );
        let settings = TrainerSettings {
            optimizer: OptimizerConfig { batch: 8, epochs: 20, ..OptimizerConfig::default() },
            seed: 3,
            ..TrainerSettings::default()
        };
        let mut trainer = Trainer::new(model, settings).unwrap();
        for _ in 0..20 {
            trainer.train_epoch(&data).unwrap();
        }
        let eval = evaluate(&trainer.model, &data, 32).unwrap();
        assert_eq!(eval.error_rate, 0.0, "training error {}", eval.error_rate);
    }

    #[test]
    fn deterministic_sigmoid_descends_a_convex_slope() {
        let data = synth_gaussian_clusters(60, 3, 5, 3.0, 7).unwrap();
        let model = small_model(UnitKind::Sigmoid, 5, 6, 3, 4);
        let settings = TrainerSettings {
            optimizer: OptimizerConfig { batch: 10, ..OptimizerConfig::default() },
            seed: 5,
            ..TrainerSettings::default()
        };
        let mut trainer = Trainer::new(model, settings).unwrap();
        let first = trainer.train_epoch(&data).unwrap().train_loss;
        let mut last = first;
        for _ in 0..4 {
            last = trainer.train_epoch(&data).unwrap().train_loss;
        }
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let data = synth_gaussian_clusters(60, 3, 5, 3.0, 11).unwrap();
        let (train, valid, _) = crate::data::split(&data, (0.7, 0.3, 0.0), 13).unwrap();
        let mk = || {
            let model = small_model(UnitKind::Sbn, 5, 6, 3, 17);
            let settings = TrainerSettings {
                optimizer: OptimizerConfig {
                    batch: 8,
                    epochs: 3,
                    lr_gater: 0.001,
                    ..OptimizerConfig::default()
                },
                penalty: Some(PenaltyMode::Kl),
                calibrate: true,
                seed: 19,
                ..TrainerSettings::default()
            };
            Trainer::new(model, settings).unwrap()
        };
        let mut a = mk();
        let mut b = mk();
        let ra = a.run(&train, &valid).unwrap();
        let rb = b.run(&train, &valid).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(ra.rows.len(), rb.rows.len());
        for (x, y) in ra.rows.iter().zip(&rb.rows) {
            assert_eq!(
                (x.epoch, x.train_loss, x.valid_error, x.s_e, x.lambda, x.expert_macs_sparse),
                (y.epoch, y.train_loss, y.valid_error, y.s_e, y.lambda, y.expert_macs_sparse)
            );
        }
    }

    #[test]
    fn zero_gater_learning_rate_freezes_the_gater() {
        let data = synth_gaussian_clusters(40, 2, 5, 3.0, 23).unwrap();
        let model = small_model(UnitKind::Sbn, 5, 6, 2, 29);
        let w1 = model.layer.gater_w1.clone();
        let b1 = model.layer.gater_b1.clone();
        let w2 = model.layer.gater_w2.clone();
        let b2 = model.layer.gater_b2.clone();
        let expert_before = model.layer.expert_w.clone();
        let settings = TrainerSettings {
            optimizer: OptimizerConfig { batch: 8, lr_gater: 0.0, ..OptimizerConfig::default() },
            seed: 31,
            ..TrainerSettings::default()
        };
        let mut trainer = Trainer::new(model, settings).unwrap();
        trainer.train_epoch(&data).unwrap();
        assert_eq!(trainer.model.layer.gater_w1, w1);
        assert_eq!(trainer.model.layer.gater_b1, b1);
        assert_eq!(trainer.model.layer.gater_w2, w2);
        assert_eq!(trainer.model.layer.gater_b2, b2);
        assert_ne!(trainer.model.layer.expert_w, expert_before);
    }

    #[test]
    fn closed_gate_leaves_its_expert_column_untouched() {
        let data = synth_gaussian_clusters(24, 2, 5, 3.0, 37).unwrap();
        let mut model = small_model(UnitKind::Rectifier, 5, 6, 2, 41);
        model.layer.gater_b2[2] = -100.0;
        let expert_col_before: Vec<f64> = (0..5).map(|k| model.layer.expert_w.get(k, 2)).collect();
        let out_row_before = model.out_w.row(2).to_vec();
        let mut trainer = Trainer::new(model, TrainerSettings {
            optimizer: OptimizerConfig { batch: 8, ..OptimizerConfig::default() },
            seed: 43,
            ..TrainerSettings::default()
        })
        .unwrap();
        trainer.train_epoch(&data).unwrap();
        let expert_col_after: Vec<f64> =
            (0..5).map(|k| trainer.model.layer.expert_w.get(k, 2)).collect();
        assert_eq!(expert_col_after, expert_col_before);
        assert_eq!(trainer.model.out_w.row(2), &out_row_before[..]);
    }

    #[test]
    fn evaluate_majority_class_error() {
        let data = synth_gaussian_clusters(100, 10, 12, 0.0, 47).unwrap();
        let mut model = small_model(UnitKind::Sigmoid, 12, 6, 10, 53);
        model.layer.gater_w1 = Matrix::zeros(12, 3);
        model.layer.gater_w2 = Matrix::zeros(3, 6);
        model.layer.expert_w = Matrix::zeros(12, 6);
        model.out_w = Matrix::zeros(6, 10);
        model.out_b = vec![0.0; 10];
        model.out_b[0] = 1.0;
        let eval = evaluate(&model, &data, 32).unwrap();
        assert!((eval.error_rate - 0.9).abs() < 1e-15);
        let again = evaluate(&model, &data, 32).unwrap();
        assert_eq!(eval, again);
    }

    #[test]
    fn calibrated_threshold_hits_target_sparsity() {
        let data = synth_gaussian_clusters(300, 4, 8, 2.0, 59).unwrap();
        for kind in [UnitKind::Sts, UnitKind::NoisyRectifier(crate::units::NoiseKind::Logistic)] {
            let model = small_model(kind, 8, 10, 4, 61);
            let penalty = if kind.is_sigmoid_family() { PenaltyMode::Kl } else { PenaltyMode::L1 };
            let mut trainer = Trainer::new(model, TrainerSettings {
                penalty: Some(penalty),
                target_sparsity: 0.1,
                seed: 67,
                ..TrainerSettings::default()
            })
            .unwrap();
            trainer.calibrate(&data, 300).unwrap();
            let eval = evaluate(&trainer.model, &data, 64).unwrap();
            assert!((eval.s_e - 0.1).abs() <= 0.01, "kind {kind}: s_e {}", eval.s_e);
        }
    }

    #[test]
    fn report_serializes_to_the_fixed_csv_layout() {
        let report = TrainReport {
            rows: vec![EpochRow {
                epoch: 1,
                train_loss: 0.5,
                valid_error: 0.25,
                s_e: 0.125,
                lambda: 2.0,
                expert_macs_sparse: 640,
                wall_ms: 12.5,
            }],
            best_epoch: 1,
            best_valid_error: 0.25,
            stopped_early: false,
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.5,0.25,0.125,2,640,12.5");
        assert!(lines.next().is_none());
    }

    #[test]
    fn penalty_kind_combinations_are_validated() {
        let sbn = small_model(UnitKind::Sbn, 4, 6, 2, 71);
        let err = Trainer::new(sbn, TrainerSettings {
            penalty: Some(PenaltyMode::L1),
            ..TrainerSettings::default()
        });
        assert!(matches!(err, Err(Error::Config(_))));

        let rect = small_model(UnitKind::Rectifier, 4, 6, 2, 73);
        let err = Trainer::new(rect, TrainerSettings {
            penalty: Some(PenaltyMode::Kl),
            ..TrainerSettings::default()
        });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let data = synth_gaussian_clusters(40, 2, 5, 0.0, 79).unwrap();
        let (train, valid, _) = crate::data::split(&data, (0.5, 0.5, 0.0), 83).unwrap();
        let model = small_model(UnitKind::Sigmoid, 5, 6, 2, 89);
        let settings = TrainerSettings {
            optimizer: OptimizerConfig {
                batch: 8,
                epochs: 100,
                patience: 3,
                ..OptimizerConfig::default()
            },
            seed: 97,
            ..TrainerSettings::default()
        };
        let mut trainer = Trainer::new(model, settings).unwrap();
        let report = trainer.run(&train, &valid).unwrap();
        assert!(report.rows.len() < 100);
        let last_epoch = report.rows.last().unwrap().epoch;
        assert!(last_epoch - report.best_epoch >= 3 || report.stopped_early);
    }
}
