//! Experiment configuration: one flat struct covering every knob, a
//! key=value file format, and the resolution of per-kind automatic
//! defaults (learning rates, momentum, penalty mode, bias init).
//!
//! Every run echoes its full effective configuration back to disk in the
//! same format, so a run can be reproduced from that file alone.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{load_idx, split, synth_gaussian_clusters, Dataset};
use crate::math::{label, logit, RngStream};
use crate::network::GatedModel;
use crate::noise::{derive_beta_params, GateNoise};
use crate::sparsity::PenaltyMode;
use crate::train::{OptimizerConfig, TrainerSettings};
use crate::units::{NoiseKind, StVariant, UnitKind};
use crate::verify::VerifySettings;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub unit: String,
    pub st_variant: String,
    pub estimator_baseline: String,
    pub baseline_decay: f64,
    pub noise: String,
    pub noise_sd: f64,
    pub beta: f64,
    pub sparsity_target: f64,
    pub sparsity_band: f64,
    pub lambda0: f64,
    pub lambda_step: f64,
    pub penalty: String,
    pub lr_main: f64,
    /// Negative means "auto": 0.001 for SBN, lr_main otherwise.
    pub lr_gater: f64,
    /// Negative means "auto": 0.9 for STS, 0 otherwise.
    pub momentum: f64,
    pub max_norm: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub dataset: String,
    pub data_dir: String,
    pub mnist_subset: usize,
    pub mnist_valid_frac: f64,
    pub synth_n: usize,
    pub synth_classes: usize,
    pub synth_d: usize,
    pub synth_separation: f64,
    pub bottleneck: usize,
    pub gates: usize,
    pub init_scale: f64,
    /// NaN means "auto": logit(target) for penalized sigmoid-family gates.
    pub gater_bias_init: f64,
    pub revival_threshold: f64,
    pub revival_step: f64,
    pub firing_decay: f64,
    pub penalty_in_loss: bool,
    pub sparse_execution: bool,
    pub calibrate: String,
    pub mc_samples: usize,
    pub unbiasedness_problems: usize,
    pub rect_samples: usize,
    pub st_trials: usize,
    pub estimator_bias: f64,
    pub checkpoint: String,
    pub seed: u64,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            unit: "sbn".into(),
            st_variant: "sigmoid-deriv".into(),
            estimator_baseline: "optimal".into(),
            baseline_decay: 0.01,
            noise: "none".into(),
            noise_sd: 1.0,
            beta: 40.1,
            sparsity_target: 0.1,
            sparsity_band: 0.01,
            lambda0: 1.0,
            lambda_step: 1.1,
            penalty: "auto".into(),
            lr_main: 0.1,
            lr_gater: -1.0,
            momentum: -1.0,
            max_norm: 2.0,
            batch: 32,
            epochs: 50,
            patience: 10,
            dataset: "synth".into(),
            data_dir: "data/mnist".into(),
            mnist_subset: 0,
            mnist_valid_frac: 1.0 / 6.0,
            synth_n: 2000,
            synth_classes: 10,
            synth_d: 16,
            synth_separation: 3.0,
            bottleneck: 400,
            gates: 2000,
            init_scale: 1.0,
            gater_bias_init: f64::NAN,
            revival_threshold: 0.02,
            revival_step: 0.05,
            firing_decay: 0.99,
            penalty_in_loss: true,
            sparse_execution: true,
            calibrate: "auto".into(),
            mc_samples: 1_000_000,
            unbiasedness_problems: 25,
            rect_samples: 1_000_000,
            st_trials: 100,
            estimator_bias: 0.0,
            checkpoint: String::new(),
            seed: 0,
            out: "out".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("cannot parse {key} value {value:?}"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {key} value {value:?} as bool"))),
    }
}

impl ExperimentConfig {
    /// Apply one key=value assignment (file line or flag override).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "unit" => self.unit = value.into(),
            "st-variant" => self.st_variant = value.into(),
            "estimator-baseline" => self.estimator_baseline = value.into(),
            "baseline-decay" => self.baseline_decay = parse(key, value)?,
            "noise" => self.noise = value.into(),
            "noise-sd" => self.noise_sd = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "sparsity-target" => self.sparsity_target = parse(key, value)?,
            "sparsity-band" => self.sparsity_band = parse(key, value)?,
            "lambda0" => self.lambda0 = parse(key, value)?,
            "lambda-step" => self.lambda_step = parse(key, value)?,
            "penalty" => self.penalty = value.into(),
            "lr-main" => self.lr_main = parse(key, value)?,
            "lr-gater" => {
                self.lr_gater = if value == "auto" { -1.0 } else { parse(key, value)? }
            }
            "momentum" => {
                self.momentum = if value == "auto" { -1.0 } else { parse(key, value)? }
            }
            "max-norm" => self.max_norm = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "dataset" => self.dataset = value.into(),
            "data-dir" => self.data_dir = value.into(),
            "mnist-subset" => self.mnist_subset = parse(key, value)?,
            "mnist-valid-frac" => self.mnist_valid_frac = parse(key, value)?,
            "synth-n" => self.synth_n = parse(key, value)?,
            "synth-classes" => self.synth_classes = parse(key, value)?,
            "synth-d" => self.synth_d = parse(key, value)?,
            "synth-separation" => self.synth_separation = parse(key, value)?,
            "bottleneck" => self.bottleneck = parse(key, value)?,
            "gates" => self.gates = parse(key, value)?,
            "init-scale" => self.init_scale = parse(key, value)?,
            "gater-bias-init" => {
                self.gater_bias_init =
                    if value == "auto" { f64::NAN } else { parse(key, value)? }
            }
            "revival-threshold" => self.revival_threshold = parse(key, value)?,
            "revival-step" => self.revival_step = parse(key, value)?,
            "firing-decay" => self.firing_decay = parse(key, value)?,
            "penalty-in-loss" => self.penalty_in_loss = parse_bool(key, value)?,
            "sparse-execution" => self.sparse_execution = parse_bool(key, value)?,
            "calibrate" => self.calibrate = value.into(),
            "mc-samples" => self.mc_samples = parse(key, value)?,
            "unbiasedness-problems" => self.unbiasedness_problems = parse(key, value)?,
            "rect-samples" => self.rect_samples = parse(key, value)?,
            "st-trials" => self.st_trials = parse(key, value)?,
            "estimator-bias" => self.estimator_bias = parse(key, value)?,
            "checkpoint" => self.checkpoint = value.into(),
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = value.into(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a key=value file: one assignment per line, '#' comments,
    /// blank lines ignored.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The full effective configuration in file syntax. Parsing this text
    /// back reproduces the configuration exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let auto_f = |v: f64| if v < 0.0 { "auto".to_string() } else { format!("{v}") };
        let auto_nan = |v: f64| if v.is_nan() { "auto".to_string() } else { format!("{v}") };
        let _ = writeln!(s, "unit = {}", self.unit);
        let _ = writeln!(s, "st-variant = {}", self.st_variant);
        let _ = writeln!(s, "estimator-baseline = {}", self.estimator_baseline);
        let _ = writeln!(s, "baseline-decay = {}", self.baseline_decay);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "noise-sd = {}", self.noise_sd);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "sparsity-target = {}", self.sparsity_target);
        let _ = writeln!(s, "sparsity-band = {}", self.sparsity_band);
        let _ = writeln!(s, "lambda0 = {}", self.lambda0);
        let _ = writeln!(s, "lambda-step = {}", self.lambda_step);
        let _ = writeln!(s, "penalty = {}", self.penalty);
        let _ = writeln!(s, "lr-main = {}", self.lr_main);
        let _ = writeln!(s, "lr-gater = {}", auto_f(self.lr_gater));
        let _ = writeln!(s, "momentum = {}", auto_f(self.momentum));
        let _ = writeln!(s, "max-norm = {}", self.max_norm);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "data-dir = {}", self.data_dir);
        let _ = writeln!(s, "mnist-subset = {}", self.mnist_subset);
        let _ = writeln!(s, "mnist-valid-frac = {}", self.mnist_valid_frac);
        let _ = writeln!(s, "synth-n = {}", self.synth_n);
        let _ = writeln!(s, "synth-classes = {}", self.synth_classes);
        let _ = writeln!(s, "synth-d = {}", self.synth_d);
        let _ = writeln!(s, "synth-separation = {}", self.synth_separation);
        let _ = writeln!(s, "bottleneck = {}", self.bottleneck);
        let _ = writeln!(s, "gates = {}", self.gates);
        let _ = writeln!(s, "init-scale = {}", self.init_scale);
        let _ = writeln!(s, "gater-bias-init = {}", auto_nan(self.gater_bias_init));
        let _ = writeln!(s, "revival-threshold = {}", self.revival_threshold);
        let _ = writeln!(s, "revival-step = {}", self.revival_step);
        let _ = writeln!(s, "firing-decay = {}", self.firing_decay);
        let _ = writeln!(s, "penalty-in-loss = {}", self.penalty_in_loss);
        let _ = writeln!(s, "sparse-execution = {}", self.sparse_execution);
        let _ = writeln!(s, "calibrate = {}", self.calibrate);
        let _ = writeln!(s, "mc-samples = {}", self.mc_samples);
        let _ = writeln!(s, "unbiasedness-problems = {}", self.unbiasedness_problems);
        let _ = writeln!(s, "rect-samples = {}", self.rect_samples);
        let _ = writeln!(s, "st-trials = {}", self.st_trials);
        let _ = writeln!(s, "estimator-bias = {}", self.estimator_bias);
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out);
        s
    }

    pub fn unit_kind(&self) -> Result<UnitKind> {
        let variant = match self.st_variant.as_str() {
            "plain" => StVariant::Plain,
            "sigmoid-deriv" => StVariant::TimesSigmoidDeriv,
            other => {
                return Err(Error::Config(format!(
                    "unknown st-variant {other:?} (expected plain or sigmoid-deriv)"
                )))
            }
        };
        Ok(match self.unit.as_str() {
            "noisy-rect" => UnitKind::NoisyRectifier(NoiseKind::Logistic),
            "noisy-rect-gauss" => {
                UnitKind::NoisyRectifier(NoiseKind::Gaussian { sd: self.noise_sd })
            }
            "rect" => UnitKind::Rectifier,
            "sts" => UnitKind::Sts,
            "sbn" => UnitKind::Sbn,
            "st" => UnitKind::StraightThrough(variant),
            "sigmoid" => UnitKind::Sigmoid,
            "sigmoid-noise" => UnitKind::SigmoidWithNoise { sd: self.noise_sd },
            other => {
                return Err(Error::Config(format!(
                    "unknown unit {other:?} (expected one of noisy-rect, noisy-rect-gauss, \
                     rect, sts, sbn, st, sigmoid, sigmoid-noise)"
                )))
            }
        })
    }

    pub fn gate_noise(&self) -> Result<GateNoise> {
        Ok(match self.noise.as_str() {
            "none" => GateNoise::None,
            "gaussian" => GateNoise::Gaussian { sd: self.noise_sd },
            "beta" => GateNoise::Beta(derive_beta_params(self.beta, self.sparsity_target)?),
            other => {
                return Err(Error::Config(format!(
                    "unknown noise {other:?} (expected none, gaussian, or beta)"
                )))
            }
        })
    }

    pub fn penalty_mode(&self, kind: &UnitKind) -> Result<Option<PenaltyMode>> {
        Ok(match self.penalty.as_str() {
            "none" => None,
            "kl" => Some(PenaltyMode::Kl),
            "l1" => Some(PenaltyMode::L1),
            "auto" => match kind {
                UnitKind::Sbn | UnitKind::Sts | UnitKind::StraightThrough(_) => {
                    Some(PenaltyMode::Kl)
                }
                UnitKind::NoisyRectifier(_) | UnitKind::Rectifier => Some(PenaltyMode::L1),
                UnitKind::Sigmoid | UnitKind::SigmoidWithNoise { .. } => None,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown penalty {other:?} (expected auto, kl, l1, or none)"
                )))
            }
        })
    }

    fn resolved_lr_gater(&self, kind: &UnitKind) -> f64 {
        if self.lr_gater >= 0.0 {
            self.lr_gater
        } else if matches!(kind, UnitKind::Sbn) {
            0.001
        } else {
            self.lr_main
        }
    }

    fn resolved_momentum(&self, kind: &UnitKind) -> f64 {
        if self.momentum >= 0.0 {
            self.momentum
        } else if matches!(kind, UnitKind::Sts) {
            0.9
        } else {
            0.0
        }
    }

    fn resolved_calibrate(&self, penalty: Option<PenaltyMode>) -> Result<bool> {
        match self.calibrate.as_str() {
            "auto" => Ok(penalty.is_some()),
            other => parse_bool("calibrate", other),
        }
    }

    pub fn trainer_settings(&self) -> Result<TrainerSettings> {
        let kind = self.unit_kind()?;
        let penalty = self.penalty_mode(&kind)?;
        let reinforce_baseline = match self.estimator_baseline.as_str() {
            "optimal" => true,
            "none" => false,
            other => {
                return Err(Error::Config(format!(
                    "unknown estimator-baseline {other:?} (expected optimal or none)"
                )))
            }
        };
        Ok(TrainerSettings {
            optimizer: OptimizerConfig {
                lr_main: self.lr_main,
                lr_gater: self.resolved_lr_gater(&kind),
                momentum: self.resolved_momentum(&kind),
                max_norm: self.max_norm,
                batch: self.batch,
                epochs: self.epochs,
                patience: self.patience,
            },
            penalty,
            target_sparsity: self.sparsity_target,
            lambda0: self.lambda0,
            sparsity_band: self.sparsity_band,
            lambda_step: self.lambda_step,
            baseline_decay: self.baseline_decay,
            firing_decay: self.firing_decay,
            revival_threshold: self.revival_threshold,
            revival_step: self.revival_step,
            penalty_in_loss_signal: self.penalty_in_loss,
            reinforce_baseline,
            sparse_execution: self.sparse_execution,
            calibrate: self.resolved_calibrate(penalty)?,
            seed: self.seed,
        })
    }

    /// Build the model for a dataset, including the automatic gater bias
    /// placement that starts penalized sigmoid-family gates near the
    /// sparsity target.
    pub fn build_model(&self, d: usize, classes: usize) -> Result<GatedModel> {
        let kind = self.unit_kind()?;
        let noise = self.gate_noise()?;
        let mut model = GatedModel::new_random(
            d,
            self.bottleneck,
            self.gates,
            classes,
            kind,
            noise,
            self.init_scale,
            &RngStream::new(self.seed, label("model-init")),
        )?;
        let bias = if self.gater_bias_init.is_nan() {
            let penalized = self.penalty_mode(&kind)?.is_some();
            if penalized && kind.is_sigmoid_family() {
                // start gates firing near the target; STS fires with
                // probability sqrt(p), so it needs p = target^2
                let p = match kind {
                    UnitKind::Sts => self.sparsity_target * self.sparsity_target,
                    _ => self.sparsity_target,
                };
                logit(p) - noise.test_time_value()
            } else {
                0.0
            }
        } else {
            self.gater_bias_init
        };
        for b in model.layer.gater_b2.iter_mut() {
            *b = bias;
        }
        Ok(model)
    }

    /// Load (train, valid, test) per the dataset settings.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset, Dataset)> {
        match self.dataset.as_str() {
            "synth" => {
                let all = synth_gaussian_clusters(
                    self.synth_n,
                    self.synth_classes,
                    self.synth_d,
                    self.synth_separation,
                    self.seed,
                )?;
                split(&all, (0.8, 0.1, 0.1), self.seed)
            }
            "mnist" => {
                let dir = Path::new(&self.data_dir);
                let full = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let pool =
                    if self.mnist_subset > 0 { full.head(self.mnist_subset)? } else { full };
                if !(self.mnist_valid_frac > 0.0 && self.mnist_valid_frac < 1.0) {
                    return Err(Error::Config(format!(
                        "mnist-valid-frac {} not in (0,1)",
                        self.mnist_valid_frac
                    )));
                }
                let fractions = (1.0 - self.mnist_valid_frac, self.mnist_valid_frac, 0.0);
                let (train, valid, _) = split(&pool, fractions, self.seed)?;
                let test = load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                Ok((train, valid, test))
            }
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected synth or mnist)"
            ))),
        }
    }

    /// The evaluation split alone, skipping training data (the MNIST
    /// training file is large and evaluate never touches it).
    pub fn load_eval_dataset(&self) -> Result<Dataset> {
        match self.dataset.as_str() {
            "mnist" => {
                let dir = Path::new(&self.data_dir);
                load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )
            }
            _ => self.load_datasets().map(|(_, _, test)| test),
        }
    }

    pub fn verify_settings(&self) -> VerifySettings {
        VerifySettings {
            seed: self.seed,
            unbiasedness_problems: self.unbiasedness_problems,
            mc_samples: self.mc_samples,
            rect_samples: self.rect_samples,
            st_trials: self.st_trials,
            estimator_bias: self.estimator_bias,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_config_roundtrips() {
        let mut cfg = ExperimentConfig::default();
        cfg.unit = "sts".into();
        cfg.lr_gater = 0.05;
        cfg.momentum = -1.0;
        cfg.seed = 1234;
        cfg.synth_separation = 2.25;
        let text = cfg.to_kv();
        let mut back = ExperimentConfig::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.apply_kv(k.trim(), v.trim()).unwrap();
        }
        // NaN sentinel compares unequal; check it mapped to auto and patch
        assert!(back.gater_bias_init.is_nan());
        back.gater_bias_init = f64::NAN;
        let again = back.to_kv();
        assert_eq!(text, again);
    }

    #[test]
    fn file_parsing_handles_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nunit = sts\n\nbatch = 16  # trailing\n").unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.unit, "sts");
        assert_eq!(cfg.batch, 16);

        std::fs::write(&path, "no equals sign\n").unwrap();
        assert!(matches!(cfg.load_file(&path), Err(Error::Config(_))));
        std::fs::write(&path, "bogus-key = 3\n").unwrap();
        assert!(matches!(cfg.load_file(&path), Err(Error::Config(_))));
        std::fs::write(&path, "batch = notanumber\n").unwrap();
        assert!(matches!(cfg.load_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn unit_kinds_parse_to_the_documented_set() {
        let mut cfg = ExperimentConfig::default();
        for (name, expect) in [
            ("noisy-rect", UnitKind::NoisyRectifier(NoiseKind::Logistic)),
            ("rect", UnitKind::Rectifier),
            ("sts", UnitKind::Sts),
            ("sbn", UnitKind::Sbn),
            ("st", UnitKind::StraightThrough(StVariant::TimesSigmoidDeriv)),
            ("sigmoid", UnitKind::Sigmoid),
            ("sigmoid-noise", UnitKind::SigmoidWithNoise { sd: 1.0 }),
        ] {
            cfg.unit = name.into();
            assert_eq!(cfg.unit_kind().unwrap(), expect, "{name}");
        }
        cfg.unit = "st".into();
        cfg.st_variant = "plain".into();
        assert_eq!(cfg.unit_kind().unwrap(), UnitKind::StraightThrough(StVariant::Plain));
        cfg.unit = "mystery".into();
        assert!(cfg.unit_kind().is_err());
    }

    #[test]
    fn per_kind_defaults_resolve() {
        let mut cfg = ExperimentConfig::default();
        cfg.unit = "sbn".into();
        let s = cfg.trainer_settings().unwrap();
        assert_eq!(s.optimizer.lr_gater, 0.001);
        assert_eq!(s.optimizer.momentum, 0.0);
        assert_eq!(s.penalty, Some(PenaltyMode::Kl));
        assert!(s.calibrate);

        cfg.unit = "sts".into();
        let s = cfg.trainer_settings().unwrap();
        assert_eq!(s.optimizer.lr_gater, 0.1);
        assert_eq!(s.optimizer.momentum, 0.9);

        cfg.unit = "noisy-rect".into();
        let s = cfg.trainer_settings().unwrap();
        assert_eq!(s.penalty, Some(PenaltyMode::L1));
        assert_eq!(s.optimizer.momentum, 0.0);

        cfg.unit = "sigmoid".into();
        let s = cfg.trainer_settings().unwrap();
        assert_eq!(s.penalty, None);
        assert!(!s.calibrate);

        cfg.unit = "sbn".into();
        cfg.lr_gater = 0.07;
        cfg.momentum = 0.5;
        let s = cfg.trainer_settings().unwrap();
        assert_eq!(s.optimizer.lr_gater, 0.07);
        assert_eq!(s.optimizer.momentum, 0.5);
    }

    #[test]
    fn auto_bias_init_targets_the_sparsity_level() {
        let mut cfg = ExperimentConfig::default();
        cfg.unit = "sbn".into();
        cfg.bottleneck = 3;
        cfg.gates = 8;
        let model = cfg.build_model(5, 3).unwrap();
        let expect = logit(0.1);
        assert!(model.layer.gater_b2.iter().all(|&b| (b - expect).abs() < 1e-12));

        cfg.unit = "sigmoid".into();
        let model = cfg.build_model(5, 3).unwrap();
        assert!(model.layer.gater_b2.iter().all(|&b| b == 0.0));

        cfg.unit = "sbn".into();
        cfg.gater_bias_init = -3.0;
        let model = cfg.build_model(5, 3).unwrap();
        assert!(model.layer.gater_b2.iter().all(|&b| b == -3.0));
    }

    #[test]
    fn synth_loading_splits_consistently() {
        let mut cfg = ExperimentConfig::default();
        cfg.synth_n = 100;
        cfg.synth_classes = 4;
        cfg.synth_d = 6;
        let (tr, va, te) = cfg.load_datasets().unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 100);
        assert_eq!(tr.len(), 80);
        assert_eq!(tr.dim(), 6);
    }

    #[test]
    fn invalid_combinations_fail_before_compute() {
        let mut cfg = ExperimentConfig::default();
        cfg.unit = "rect".into();
        cfg.penalty = "kl".into();
        let settings = cfg.trainer_settings().unwrap();
        let model = cfg.build_model(5, 3);
        // model construction is fine; the trainer rejects the combination
        let err = crate::train::Trainer::new(model.unwrap(), settings);
        assert!(matches!(err, Err(Error::Config(_))));

        cfg.penalty = "auto".into();
        cfg.noise = "beta".into();
        // beta noise on a rectifier kind is rejected at model construction
        assert!(cfg.build_model(5, 3).is_err());
    }
}
