//! Conditionally-computed layer: a gater path (input, tanh bottleneck of
//! size M, then N stochastic gates) multiplied elementwise into an expert
//! path (a linear map of the input into N units), followed by a softmax
//! readout. The sparse execution path computes an expert column only when
//! its gate fired and counts the multiply-accumulates it actually performs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::{affine, sigm, Matrix, RngStream};
use crate::noise::GateNoise;
use crate::units::{deterministic_output, gate_value, sample_unit, UnitActivation, UnitKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Multiply-accumulate counts for one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub gater_macs: u64,
    pub expert_macs_dense: u64,
    pub expert_macs_sparse: u64,
    pub output_macs: u64,
}

impl MacCount {
    pub fn accumulate(&mut self, other: &MacCount) {
        self.gater_macs += other.gater_macs;
        self.expert_macs_dense += other.expert_macs_dense;
        self.expert_macs_sparse += other.expert_macs_sparse;
        self.output_macs += other.output_macs;
    }
}

/// One gated layer. The gater bottleneck must be strictly narrower than the
/// gate count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedLayer {
    pub gater_w1: Matrix,
    pub gater_b1: Vec<f64>,
    pub gater_w2: Matrix,
    pub gater_b2: Vec<f64>,
    pub expert_w: Matrix,
    pub expert_b: Vec<f64>,
    pub kind: UnitKind,
    pub noise: GateNoise,
    pub threshold: Option<f64>,
}

fn check_kind_noise(kind: &UnitKind, noise: &GateNoise) -> Result<()> {
    let has_own_noise = matches!(
        kind,
        UnitKind::NoisyRectifier(_) | UnitKind::Rectifier | UnitKind::SigmoidWithNoise { .. }
    );
    if has_own_noise && *noise != GateNoise::None {
        return Err(Error::Config(format!(
            "unit kind {kind} carries its own noise source; layer noise must be none"
        )));
    }
    Ok(())
}

fn glorot(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Matrix {
    let limit = scale * (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| limit * (2.0 * rng.next_f64() - 1.0))
}

impl GatedLayer {
    pub fn new_random(
        d: usize,
        m: usize,
        n: usize,
        kind: UnitKind,
        noise: GateNoise,
        init_scale: f64,
        rng: &RngStream,
    ) -> Result<GatedLayer> {
        if d == 0 || m == 0 || n == 0 {
            return Err(Error::InvalidParameter("layer dimensions must be positive".into()));
        }
        if m >= n {
            return Err(Error::InvalidParameter(format!(
                "gater bottleneck {m} must be smaller than gate count {n}"
            )));
        }
        check_kind_noise(&kind, &noise)?;
        let layer = GatedLayer {
            gater_w1: glorot(d, m, init_scale, &mut rng.derive(1)),
            gater_b1: vec![0.0; m],
            gater_w2: glorot(m, n, init_scale, &mut rng.derive(2)),
            gater_b2: vec![0.0; n],
            expert_w: glorot(d, n, init_scale, &mut rng.derive(3)),
            expert_b: vec![0.0; n],
            kind,
            noise,
            threshold: None,
        };
        Ok(layer)
    }

    pub fn d(&self) -> usize {
        self.gater_w1.rows()
    }

    pub fn m(&self) -> usize {
        self.gater_w1.cols()
    }

    pub fn n(&self) -> usize {
        self.gater_w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m, n) = (self.d(), self.m(), self.n());
        if m >= n {
            return Err(Error::Checkpoint(format!("bottleneck {m} not smaller than {n} gates")));
        }
        let shape_ok = self.gater_w2.rows() == m
            && self.gater_b1.len() == m
            && self.gater_b2.len() == n
            && self.expert_w.rows() == d
            && self.expert_w.cols() == n
            && self.expert_b.len() == n;
        if !shape_ok {
            return Err(Error::Checkpoint("inconsistent layer shapes".into()));
        }
        let finite = self.gater_w1.is_finite()
            && self.gater_w2.is_finite()
            && self.expert_w.is_finite()
            && self.gater_b1.iter().chain(&self.gater_b2).chain(&self.expert_b).all(|v| v.is_finite())
            && self.threshold.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        check_kind_noise(&self.kind, &self.noise)
    }

    /// Deterministic replacement for the layer's injected noise.
    pub fn noise_mean(&self) -> f64 {
        self.noise.test_time_value()
    }

    /// Both gater affines: tanh bottleneck output and pre-gate activations.
    pub fn gater_preactivations(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let hidden = affine(x, &self.gater_w1, &self.gater_b1)?.map(f64::tanh);
        let pre = affine(&hidden, &self.gater_w2, &self.gater_b2)?;
        Ok((hidden, pre))
    }

    /// Run the gater path. In train mode each (example, unit) pair gets its
    /// own substream of `batch_rng`, keyed by the example id and unit index,
    /// so draws do not depend on batch composition or evaluation order. In
    /// test mode gates are determinized and `batch_rng`/`example_ids` are
    /// ignored.
    pub fn gater_forward(
        &self,
        x: &Matrix,
        mode: Mode,
        batch_rng: &RngStream,
        example_ids: &[u64],
    ) -> Result<GaterForward> {
        let (hidden, pre) = self.gater_preactivations(x)?;
        let batch = pre.rows();
        let n = pre.cols();
        let mut acts = Vec::with_capacity(batch * n);
        let mut gates = Matrix::zeros(batch, n);
        match mode {
            Mode::Train => {
                if example_ids.len() != batch {
                    return Err(Error::DimensionMismatch(format!(
                        "{} example ids for a batch of {batch}",
                        example_ids.len()
                    )));
                }
                for e in 0..batch {
                    let ex_rng = batch_rng.derive(example_ids[e]);
                    for j in 0..n {
                        let mut unit_rng = ex_rng.derive(j as u64);
                        let injected = self.noise.sample(&mut unit_rng);
                        let act = sample_unit(&self.kind, pre.get(e, j), injected, &mut unit_rng);
                        gates.set(e, j, act.h);
                        acts.push(act);
                    }
                }
            }
            Mode::Test => {
                let nm = self.noise_mean();
                for e in 0..batch {
                    for j in 0..n {
                        let a = pre.get(e, j);
                        let h = deterministic_output(&self.kind, a, nm, self.threshold);
                        let p = if self.kind.is_sigmoid_family() { sigm(a + nm) } else { 0.0 };
                        gates.set(e, j, h);
                        acts.push(UnitActivation { a, z: nm, p, b: h != 0.0, h });
                    }
                }
            }
        }
        Ok(GaterForward { hidden, pre, acts, gates })
    }

    /// Dense expert path: one affine map of the input.
    pub fn expert_forward(&self, x: &Matrix) -> Result<Matrix> {
        affine(x, &self.expert_w, &self.expert_b)
    }

    fn base_macs(&self, batch: usize) -> MacCount {
        let (d, m, n) = (self.d() as u64, self.m() as u64, self.n() as u64);
        let b = batch as u64;
        MacCount {
            gater_macs: b * (d * m + m * n),
            expert_macs_dense: b * d * n,
            expert_macs_sparse: 0,
            output_macs: 0,
        }
    }

    /// Gates first, then expert columns only where the gate fired. The
    /// output is bit-identical to the dense path because surviving columns
    /// use the same accumulation order (ascending input index, bias last).
    pub fn sparse_forward(
        &self,
        x: &Matrix,
        mode: Mode,
        batch_rng: &RngStream,
        example_ids: &[u64],
    ) -> Result<LayerForward> {
        let gater = self.gater_forward(x, mode, batch_rng, example_ids)?;
        let batch = x.rows();
        let (d, n) = (self.d(), self.n());
        let mut expert = Matrix::zeros(batch, n);
        let mut out = Matrix::zeros(batch, n);
        let mut fired = 0u64;
        for e in 0..batch {
            let xrow = x.row(e);
            for j in 0..n {
                let h = gater.gates.get(e, j);
                if h == 0.0 {
                    continue;
                }
                fired += 1;
                let mut acc = 0.0;
                for k in 0..d {
                    acc += xrow[k] * self.expert_w.get(k, j);
                }
                acc += self.expert_b[j];
                expert.set(e, j, acc);
                out.set(e, j, gate_mul(h, acc));
            }
        }
        let mut macs = self.base_macs(batch);
        macs.expert_macs_sparse = fired * d as u64;
        Ok(LayerForward { gater, expert, out, macs })
    }

    /// Reference path computing every expert column.
    pub fn dense_forward(
        &self,
        x: &Matrix,
        mode: Mode,
        batch_rng: &RngStream,
        example_ids: &[u64],
    ) -> Result<LayerForward> {
        let gater = self.gater_forward(x, mode, batch_rng, example_ids)?;
        let expert = self.expert_forward(x)?;
        let out = gated_output(&gater.gates, &expert)?;
        let mut macs = self.base_macs(x.rows());
        macs.expert_macs_sparse = macs.expert_macs_dense;
        Ok(LayerForward { gater, expert, out, macs })
    }

    /// Per-unit gate values over a batch, pooled for threshold calibration.
    /// Uses the deterministic noise replacement, no sampling.
    pub fn pooled_gate_values(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (_, pre) = self.gater_preactivations(x)?;
        let nm = self.noise_mean();
        Ok(pre.data().iter().map(|&a| gate_value(&self.kind, a, nm)).collect())
    }
}

/// The gater path's intermediate values, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GaterForward {
    pub hidden: Matrix,
    pub pre: Matrix,
    pub acts: Vec<UnitActivation>,
    pub gates: Matrix,
}

/// One layer forward pass. `expert` holds only the columns that were
/// actually computed; unfired positions stay zero.
#[derive(Debug, Clone)]
pub struct LayerForward {
    pub gater: GaterForward,
    pub expert: Matrix,
    pub out: Matrix,
    pub macs: MacCount,
}

/// Gate a single expert value. A closed gate yields exactly 0.0 so the
/// sparse path (which never touches the expert value) matches bitwise.
#[inline]
pub fn gate_mul(h: f64, expert: f64) -> f64 {
    if h == 0.0 {
        0.0
    } else {
        h * expert
    }
}

pub fn gated_output(gates: &Matrix, expert: &Matrix) -> Result<Matrix> {
    if gates.rows() != expert.rows() || gates.cols() != expert.cols() {
        return Err(Error::DimensionMismatch(format!(
            "gates {}x{} vs expert {}x{}",
            gates.rows(),
            gates.cols(),
            expert.rows(),
            expert.cols()
        )));
    }
    let mut out = Matrix::zeros(gates.rows(), gates.cols());
    for (o, (&h, &v)) in out.data_mut().iter_mut().zip(gates.data().iter().zip(expert.data())) {
        *o = gate_mul(h, v);
    }
    Ok(out)
}

/// Fraction of nonzero entries, the effective sparsity of a gate matrix.
pub fn active_fraction(gates: &Matrix) -> f64 {
    if gates.data().is_empty() {
        return 0.0;
    }
    let nz = gates.data().iter().filter(|&&v| v != 0.0).count();
    nz as f64 / gates.data().len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdCalibration {
    pub threshold: f64,
    /// All pooled values were identical; the active fraction cannot be
    /// steered by thresholding.
    pub degenerate: bool,
}

/// The (1 - target) empirical quantile of pooled gate values, so that
/// `value > threshold` keeps a fraction `target` of gates active.
pub fn calibrate_threshold(values: &[f64], target: f64) -> Result<ThresholdCalibration> {
    if values.is_empty() {
        return Err(Error::Calibration("empty calibration pool".into()));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Calibration(format!("target fraction {target} not in (0,1)")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("non-finite gate value in pool".into()));
    }
    let n = values.len();
    let rank = (((1.0 - target) * n as f64).ceil() as usize).clamp(1, n);
    let mut pool = values.to_vec();
    let (_, threshold, _) = pool.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    let threshold = *threshold;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ThresholdCalibration { threshold, degenerate: lo == hi })
}

/// Full model: one gated layer and a softmax readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedModel {
    pub layer: GatedLayer,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelForward {
    pub layer: LayerForward,
    pub logits: Matrix,
    pub macs: MacCount,
}

impl GatedModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new_random(
        d: usize,
        m: usize,
        n: usize,
        classes: usize,
        kind: UnitKind,
        noise: GateNoise,
        init_scale: f64,
        rng: &RngStream,
    ) -> Result<GatedModel> {
        if classes < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 classes, got {classes}")));
        }
        Ok(GatedModel {
            layer: GatedLayer::new_random(d, m, n, kind, noise, init_scale, rng)?,
            out_w: glorot(n, classes, init_scale, &mut rng.derive(4)),
            out_b: vec![0.0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.out_w.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.out_w.rows() != self.layer.n() || self.out_b.len() != self.out_w.cols() {
            return Err(Error::Checkpoint("readout shape mismatch".into()));
        }
        if !self.out_w.is_finite() || !self.out_b.iter().all(|v| v.is_finite()) {
            return Err(Error::Checkpoint("non-finite readout values".into()));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        batch_rng: &RngStream,
        example_ids: &[u64],
        sparse: bool,
    ) -> Result<ModelForward> {
        let layer = if sparse {
            self.layer.sparse_forward(x, mode, batch_rng, example_ids)?
        } else {
            self.layer.dense_forward(x, mode, batch_rng, example_ids)?
        };
        let logits = affine(&layer.out, &self.out_w, &self.out_b)?;
        let mut macs = layer.macs;
        macs.output_macs = (x.rows() * self.layer.n() * self.classes()) as u64;
        Ok(ModelForward { layer, logits, macs })
    }
}

/// Predicted class per row (ties break toward the lower index).
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: GatedModel,
}

pub fn save_checkpoint(path: &Path, model: &GatedModel) -> Result<()> {
    let doc = Checkpoint { format_version: CHECKPOINT_VERSION, model: model.clone() };
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GatedModel> {
    let doc: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            doc.format_version
        )));
    }
    doc.model.validate()?;
    Ok(doc.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::label;
    use crate::noise::derive_beta_params;

    fn seeded(name: &str) -> RngStream {
        RngStream::new(7, label(name))
    }

    fn small_layer(kind: UnitKind, noise: GateNoise) -> GatedLayer {
        GatedLayer::new_random(3, 2, 5, kind, noise, 1.0, &seeded("layer")).unwrap()
    }

    fn random_x(rows: usize, cols: usize, name: &str) -> Matrix {
        let mut rng = seeded(name);
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian(0.0, 1.0))
    }

    #[test]
    fn zero_weights_sigmoid_gates_sit_at_half() {
        let mut layer = small_layer(UnitKind::Sigmoid, GateNoise::None);
        layer.gater_w1 = Matrix::zeros(3, 2);
        layer.gater_w2 = Matrix::zeros(2, 5);
        layer.gater_b1 = vec![0.0; 2];
        layer.gater_b2 = vec![0.0; 5];
        let x = random_x(4, 3, "x-zero");
        let fwd = layer.gater_forward(&x, Mode::Train, &seeded("g"), &[0, 1, 2, 3]).unwrap();
        assert!(fwd.pre.data().iter().all(|&a| a == 0.0));
        assert!(fwd.gates.data().iter().all(|&h| h == 0.5));
    }

    #[test]
    fn two_unit_gater_matches_hand_arithmetic() {
        let layer = GatedLayer {
            gater_w1: Matrix::from_vec(2, 1, vec![0.3, 0.2]).unwrap(),
            gater_b1: vec![0.1],
            gater_w2: Matrix::from_vec(1, 2, vec![2.0, -1.0]).unwrap(),
            gater_b2: vec![0.0, 0.2],
            expert_w: Matrix::zeros(2, 2),
            expert_b: vec![0.0; 2],
            kind: UnitKind::Sigmoid,
            noise: GateNoise::None,
            threshold: None,
        };
        let x = Matrix::from_vec(1, 2, vec![0.5, -1.0]).unwrap();
        let (hidden, pre) = layer.gater_preactivations(&x).unwrap();
        let t = ((0.5f64 * 0.3 + -1.0 * 0.2) + 0.1).tanh();
        assert_eq!(hidden.get(0, 0), t);
        assert_eq!(pre.get(0, 0), t * 2.0);
        assert_eq!(pre.get(0, 1), t * -1.0 + 0.2);
    }

    #[test]
    fn test_mode_is_deterministic() {
        let layer = small_layer(UnitKind::Sbn, GateNoise::None);
        let x = random_x(3, 3, "x-det");
        let a = layer.gater_forward(&x, Mode::Test, &seeded("a"), &[]).unwrap();
        let b = layer.gater_forward(&x, Mode::Test, &seeded("b"), &[]).unwrap();
        assert_eq!(a.gates.data(), b.gates.data());
    }

    #[test]
    fn expert_identity_passes_input_through() {
        // d == n is fine for the expert; only the gater bottleneck is constrained
        let mut layer =
            GatedLayer::new_random(4, 2, 4, UnitKind::Sigmoid, GateNoise::None, 1.0,
                &seeded("ident"))
                .unwrap();
        layer.expert_w = Matrix::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        layer.expert_b = vec![0.0; 4];
        let x = random_x(3, 4, "x-ident");
        let h = layer.expert_forward(&x).unwrap();
        assert_eq!(h.data(), x.data());
    }

    #[test]
    fn zero_input_expert_broadcasts_bias() {
        let mut layer = small_layer(UnitKind::Sigmoid, GateNoise::None);
        layer.expert_b = vec![1.0, -2.0, 0.5, 0.0, 3.0];
        let x = Matrix::zeros(2, 3);
        let h = layer.expert_forward(&x).unwrap();
        for r in 0..2 {
            assert_eq!(h.row(r), &layer.expert_b[..]);
        }
    }

    #[test]
    fn expert_matches_triple_loop_oracle() {
        let layer = small_layer(UnitKind::Sigmoid, GateNoise::None);
        let x = random_x(4, 3, "x-oracle");
        let h = layer.expert_forward(&x).unwrap();
        for e in 0..4 {
            for j in 0..5 {
                let mut acc = layer.expert_b[j];
                for k in 0..3 {
                    acc += x.get(e, k) * layer.expert_w.get(k, j);
                }
                assert!((h.get(e, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gated_output_examples() {
        let h = Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.5]).unwrap();
        let big = Matrix::from_vec(1, 3, vec![3.0, 3.0, 3.0]).unwrap();
        let out = gated_output(&h, &big).unwrap();
        assert_eq!(out.data(), &[0.0, 3.0, 1.5]);

        let zeros = Matrix::zeros(1, 3);
        assert!(gated_output(&zeros, &big).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap();
        assert_eq!(gated_output(&ones, &big).unwrap().data(), big.data());

        let bad = Matrix::zeros(2, 2);
        assert!(gated_output(&h, &bad).is_err());
    }

    #[test]
    fn sparse_and_dense_paths_agree_bitwise() {
        for kind in [
            UnitKind::Sbn,
            UnitKind::Sts,
            UnitKind::NoisyRectifier(crate::units::NoiseKind::Logistic),
        ] {
            let layer = small_layer(kind, GateNoise::None);
            let x = random_x(6, 3, "x-eq");
            let ids: Vec<u64> = (10..16).collect();
            let rng = seeded("path");
            let sparse = layer.sparse_forward(&x, Mode::Train, &rng, &ids).unwrap();
            let dense = layer.dense_forward(&x, Mode::Train, &rng, &ids).unwrap();
            assert_eq!(sparse.gater.gates.data(), dense.gater.gates.data());
            assert_eq!(sparse.out.data(), dense.out.data(), "kind {kind}");
        }
    }

    #[test]
    fn sparse_skips_expert_columns_for_closed_gates() {
        let mut layer = small_layer(UnitKind::Sigmoid, GateNoise::None);
        layer.threshold = Some(0.99);
        // sigm never exceeds 0.99 for these activations, so every gate closes
        let x = random_x(3, 3, "x-closed");
        let fwd = layer.sparse_forward(&x, Mode::Test, &seeded("c"), &[]).unwrap();
        assert_eq!(fwd.macs.expert_macs_sparse, 0);
        assert!(fwd.out.data().iter().all(|&v| v == 0.0));
        assert!(fwd.expert.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mac_counts_at_reference_dimensions() {
        let layer =
            GatedLayer::new_random(784, 400, 2000, UnitKind::Sbn, GateNoise::None, 1.0,
                &seeded("macs"))
                .unwrap();
        let macs = layer.base_macs(1);
        assert_eq!(macs.gater_macs, 1_113_600);
        assert_eq!(macs.expert_macs_dense, 1_568_000);
    }

    #[test]
    fn sparse_mac_ratio_equals_measured_sparsity() {
        let layer = small_layer(UnitKind::Sbn, GateNoise::None);
        let x = random_x(8, 3, "x-ratio");
        let ids: Vec<u64> = (0..8).collect();
        let fwd = layer.sparse_forward(&x, Mode::Train, &seeded("r"), &ids).unwrap();
        let nnz = fwd.gater.gates.data().iter().filter(|&&v| v != 0.0).count() as u64;
        assert_eq!(fwd.macs.expert_macs_sparse * (8 * 5) as u64, fwd.macs.expert_macs_dense * nnz);
        let frac = active_fraction(&fwd.gater.gates);
        assert!((fwd.macs.expert_macs_sparse as f64 / fwd.macs.expert_macs_dense as f64 - frac)
            .abs()
            < 1e-15);
    }

    #[test]
    fn per_example_streams_ignore_batch_order() {
        let layer = small_layer(UnitKind::Sbn, GateNoise::None);
        let x = random_x(2, 3, "x-order");
        let swapped = Matrix::from_vec(
            2,
            3,
            x.row(1).iter().chain(x.row(0)).copied().collect(),
        )
        .unwrap();
        let rng = seeded("order");
        let fwd = layer.gater_forward(&x, Mode::Train, &rng, &[5, 9]).unwrap();
        let rev = layer.gater_forward(&swapped, Mode::Train, &rng, &[9, 5]).unwrap();
        assert_eq!(fwd.gates.row(0), rev.gates.row(1));
        assert_eq!(fwd.gates.row(1), rev.gates.row(0));
    }

    #[test]
    fn beta_noise_shifts_gates_toward_silence() {
        let spec = derive_beta_params(40.1, 0.1).unwrap();
        let quiet = small_layer(UnitKind::Sts, GateNoise::Beta(spec));
        let loud = small_layer(UnitKind::Sts, GateNoise::None);
        let x = random_x(200, 3, "x-beta");
        let ids: Vec<u64> = (0..200).collect();
        let rng = seeded("beta");
        let q = quiet.gater_forward(&x, Mode::Train, &rng, &ids).unwrap();
        let l = loud.gater_forward(&x, Mode::Train, &rng, &ids).unwrap();
        assert!(active_fraction(&q.gates) < active_fraction(&l.gates));
    }

    #[test]
    fn calibration_hits_the_uniform_quantile() {
        let mut rng = seeded("calib");
        let mut values: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
        rng.shuffle(&mut values);
        let cal = calibrate_threshold(&values, 0.1).unwrap();
        assert!((cal.threshold - 0.9).abs() < 1e-3, "threshold {}", cal.threshold);
        assert!(!cal.degenerate);
        let active = values.iter().filter(|&&v| v > cal.threshold).count() as f64
            / values.len() as f64;
        assert!((active - 0.1).abs() <= 0.01);
    }

    #[test]
    fn calibration_edge_cases() {
        let cal = calibrate_threshold(&[0.7; 50], 0.1).unwrap();
        assert_eq!(cal.threshold, 0.7);
        assert!(cal.degenerate);
        assert!(calibrate_threshold(&[], 0.1).is_err());
        assert!(calibrate_threshold(&[0.5], 0.0).is_err());
        assert!(calibrate_threshold(&[0.5, f64::NAN], 0.1).is_err());
    }

    #[test]
    fn model_forward_shapes_and_output_macs() {
        let model = GatedModel::new_random(3, 2, 5, 4, UnitKind::Sbn, GateNoise::None, 1.0,
            &seeded("model"))
            .unwrap();
        let x = random_x(6, 3, "x-model");
        let ids: Vec<u64> = (0..6).collect();
        let fwd = model.forward(&x, Mode::Train, &seeded("f"), &ids, true).unwrap();
        assert_eq!(fwd.logits.rows(), 6);
        assert_eq!(fwd.logits.cols(), 4);
        assert_eq!(fwd.macs.output_macs, (6 * 5 * 4) as u64);
    }

    #[test]
    fn predictions_take_the_argmax() {
        let logits = Matrix::from_vec(2, 3, vec![0.1, 0.9, 0.3, 2.0, -1.0, 2.0]).unwrap();
        assert_eq!(predictions(&logits), vec![1, 0]);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = GatedModel::new_random(3, 2, 5, 4, UnitKind::Sts, GateNoise::None, 1.0,
            &seeded("ckpt"))
            .unwrap();
        model.layer.threshold = Some(0.25);
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn checkpoint_rejects_bad_documents() {
        let dir = tempfile::tempdir().unwrap();
        let good = GatedModel::new_random(3, 2, 5, 4, UnitKind::Sbn, GateNoise::None, 1.0,
            &seeded("bad"))
            .unwrap();
        let text = serde_json::to_string(&Checkpoint { format_version: 99, model: good.clone() })
            .unwrap();
        let vpath = dir.path().join("v99.json");
        std::fs::write(&vpath, text).unwrap();
        assert!(matches!(load_checkpoint(&vpath), Err(Error::Checkpoint(_))));

        let tpath = dir.path().join("trunc.json");
        std::fs::write(&tpath, "{\"format_version\":1").unwrap();
        assert!(matches!(load_checkpoint(&tpath), Err(Error::Json(_))));

        let mut broken = good;
        broken.out_b = vec![0.0; 2];
        let bpath = dir.path().join("shape.json");
        save_checkpoint(&bpath, &broken).unwrap();
        assert!(matches!(load_checkpoint(&bpath), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn construction_validates_dimensions_and_noise() {
        assert!(GatedLayer::new_random(3, 5, 5, UnitKind::Sbn, GateNoise::None, 1.0,
            &seeded("v1"))
            .is_err());
        assert!(GatedLayer::new_random(3, 0, 5, UnitKind::Sbn, GateNoise::None, 1.0,
            &seeded("v2"))
            .is_err());
        let spec = derive_beta_params(40.1, 0.1).unwrap();
        assert!(GatedLayer::new_random(3, 2, 5, UnitKind::Rectifier, GateNoise::Beta(spec), 1.0,
            &seeded("v3"))
            .is_err());
        assert!(GatedModel::new_random(3, 2, 5, 1, UnitKind::Sbn, GateNoise::None, 1.0,
            &seeded("v4"))
            .is_err());
    }
}
