//! Command-line front end: verification, variance benchmarking, training,
//! and checkpoint evaluation. Every flag mirrors a configuration key; a
//! key=value file may set any of them and flags override the file. Each
//! run echoes its full effective configuration next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::network::{load_checkpoint, save_checkpoint, MacCount};
use crate::train::{check_kind_penalty, evaluate, EvalResult, Trainer};
use crate::verify::{baseline_grid, bench_to_csv, bench_variance, run_all};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "stogate",
    version,
    about = "Gradient estimators for stochastic hard-threshold gates: \
             verification suites, variance benchmarks, and gated-network training"
)]
pub struct Cli {
    /// key=value configuration file; flags override its entries
    #[arg(long, value_name = "FILE", global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check estimator unbiasedness, baseline optimality, unit moment
    /// identities, and straight-through sign agreement; write verify.json.
    /// Exits 0 only if every check passes.
    Verify {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep score-function baselines on the canonical single-gate problem
    /// and write exact next to Monte Carlo variance as CSV
    BenchVariance {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the gated model; write report.csv, checkpoint.json, summary.json
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a saved checkpoint on the test split; write evaluation.json
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
    },
}

impl Command {
    fn overrides(&self) -> &Overrides {
        match self {
            Command::Verify { overrides }
            | Command::BenchVariance { overrides }
            | Command::Train { overrides }
            | Command::Evaluate { overrides } => overrides,
        }
    }
}

/// One optional flag per configuration key. Values are routed through the
/// same parser as the file format, so flag and file semantics cannot drift.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// gate unit kind: noisy-rect, noisy-rect-gauss, rect, sts, sbn, st, sigmoid, sigmoid-noise
    #[arg(long)]
    unit: Option<String>,
    /// straight-through backward rule: plain or sigmoid-deriv
    #[arg(long)]
    st_variant: Option<String>,
    /// score-function baseline: optimal or none
    #[arg(long)]
    estimator_baseline: Option<String>,
    #[arg(long)]
    baseline_decay: Option<f64>,
    /// injected pre-gate noise: none, gaussian, or beta
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// shape parameter of the sparse beta noise model
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sparsity_target: Option<f64>,
    #[arg(long)]
    sparsity_band: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda_step: Option<f64>,
    /// sparsity penalty: auto, kl, l1, or none
    #[arg(long)]
    penalty: Option<String>,
    #[arg(long)]
    lr_main: Option<f64>,
    /// gater-path learning rate, or auto
    #[arg(long)]
    lr_gater: Option<String>,
    /// momentum coefficient, or auto
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    max_norm: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// dataset: synth or mnist
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    /// cap on training examples read from the image files (0 = all)
    #[arg(long)]
    mnist_subset: Option<usize>,
    /// fraction of the training pool held out for validation
    #[arg(long)]
    mnist_valid_frac: Option<f64>,
    #[arg(long)]
    synth_n: Option<usize>,
    #[arg(long)]
    synth_classes: Option<usize>,
    #[arg(long)]
    synth_d: Option<usize>,
    #[arg(long)]
    synth_separation: Option<f64>,
    /// gater bottleneck width
    #[arg(long)]
    bottleneck: Option<usize>,
    /// number of gated experts
    #[arg(long)]
    gates: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// initial gater output bias, or auto
    #[arg(long, allow_hyphen_values = true)]
    gater_bias_init: Option<String>,
    #[arg(long)]
    revival_threshold: Option<f64>,
    #[arg(long)]
    revival_step: Option<f64>,
    #[arg(long)]
    firing_decay: Option<f64>,
    #[arg(long)]
    penalty_in_loss: Option<bool>,
    #[arg(long)]
    sparse_execution: Option<bool>,
    /// calibrate the test-time threshold each epoch: auto, true, or false
    #[arg(long)]
    calibrate: Option<String>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    unbiasedness_problems: Option<usize>,
    #[arg(long)]
    rect_samples: Option<usize>,
    #[arg(long)]
    st_trials: Option<usize>,
    /// test hook: additive bias injected into the score-function estimator
    #[arg(long, allow_hyphen_values = true)]
    estimator_bias: Option<f64>,
    /// checkpoint file to evaluate
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long)]
    out: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.apply_kv($key, &v.to_string())?;
                }
            };
        }
        set!(unit, "unit");
        set!(st_variant, "st-variant");
        set!(estimator_baseline, "estimator-baseline");
        set!(baseline_decay, "baseline-decay");
        set!(noise, "noise");
        set!(noise_sd, "noise-sd");
        set!(beta, "beta");
        set!(sparsity_target, "sparsity-target");
        set!(sparsity_band, "sparsity-band");
        set!(lambda0, "lambda0");
        set!(lambda_step, "lambda-step");
        set!(penalty, "penalty");
        set!(lr_main, "lr-main");
        set!(lr_gater, "lr-gater");
        set!(momentum, "momentum");
        set!(max_norm, "max-norm");
        set!(batch, "batch");
        set!(epochs, "epochs");
        set!(patience, "patience");
        set!(dataset, "dataset");
        set!(data_dir, "data-dir");
        set!(mnist_subset, "mnist-subset");
        set!(mnist_valid_frac, "mnist-valid-frac");
        set!(synth_n, "synth-n");
        set!(synth_classes, "synth-classes");
        set!(synth_d, "synth-d");
        set!(synth_separation, "synth-separation");
        set!(bottleneck, "bottleneck");
        set!(gates, "gates");
        set!(init_scale, "init-scale");
        set!(gater_bias_init, "gater-bias-init");
        set!(revival_threshold, "revival-threshold");
        set!(revival_step, "revival-step");
        set!(firing_decay, "firing-decay");
        set!(penalty_in_loss, "penalty-in-loss");
        set!(sparse_execution, "sparse-execution");
        set!(calibrate, "calibrate");
        set!(mc_samples, "mc-samples");
        set!(unbiasedness_problems, "unbiasedness-problems");
        set!(rect_samples, "rect-samples");
        set!(st_trials, "st-trials");
        set!(estimator_bias, "estimator-bias");
        set!(checkpoint, "checkpoint");
        set!(seed, "seed");
        set!(out, "out");
        Ok(())
    }
}

/// Resolve configuration (defaults, then file, then flags), echo it, and
/// dispatch. Returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.load_file(path)?;
    }
    cli.command.overrides().apply(&mut cfg)?;
    let out_dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("effective_config.cfg"), cfg.to_kv())?;
    match &cli.command {
        Command::Verify { .. } => cmd_verify(&cfg, &out_dir),
        Command::BenchVariance { .. } => cmd_bench_variance(&cfg, &out_dir),
        Command::Train { .. } => cmd_train(&cfg, &out_dir),
        Command::Evaluate { .. } => cmd_evaluate(&cfg, &out_dir),
    }
}

fn cmd_verify(cfg: &ExperimentConfig, out_dir: &Path) -> Result<i32> {
    let report = run_all(&cfg.verify_settings());
    for c in &report.checks {
        println!(
            "{} {} measured={:.6e} expected={:.6e} tolerance={:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.expected,
            c.tolerance
        );
    }
    fs::write(out_dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    let n_pass = report.checks.iter().filter(|c| c.passed).count();
    println!(
        "verify: {}/{} checks passed, {} straight-through counterexamples",
        n_pass,
        report.checks.len(),
        report.st_counterexamples.len()
    );
    Ok(if report.passed { 0 } else { 1 })
}

fn cmd_bench_variance(cfg: &ExperimentConfig, out_dir: &Path) -> Result<i32> {
    let rows = bench_variance(cfg.seed, cfg.mc_samples, &baseline_grid());
    let path = out_dir.join("bench_variance.csv");
    fs::write(&path, bench_to_csv(&rows))?;
    println!("bench-variance: wrote {} rows to {}", rows.len(), path.display());
    Ok(0)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    unit: String,
    seed: u64,
    epochs_run: usize,
    best_epoch: usize,
    stopped_early: bool,
    final_train_loss: f64,
    best_valid_error: f64,
    test_error: f64,
    test_sparsity: f64,
    mac_ratio: f64,
    lambda: f64,
    threshold: Option<f64>,
}

fn mac_ratio(macs: &MacCount) -> f64 {
    if macs.expert_macs_dense == 0 {
        0.0
    } else {
        macs.expert_macs_sparse as f64 / macs.expert_macs_dense as f64
    }
}

fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<i32> {
    // reject inconsistent settings before touching any data
    let settings = cfg.trainer_settings()?;
    settings.optimizer.validate()?;
    let kind = cfg.unit_kind()?;
    check_kind_penalty(&kind, settings.penalty)?;
    let _ = cfg.gate_noise()?;
    if cfg.bottleneck >= cfg.gates {
        return Err(Error::Config(format!(
            "bottleneck {} must be smaller than gate count {}",
            cfg.bottleneck, cfg.gates
        )));
    }

    let (train, valid, test) = cfg.load_datasets()?;
    println!(
        "train: unit={} d={} classes={} examples={}/{}/{} gates={} bottleneck={}",
        cfg.unit,
        train.dim(),
        train.classes,
        train.len(),
        valid.len(),
        test.len(),
        cfg.gates,
        cfg.bottleneck
    );
    let model = cfg.build_model(train.dim(), train.classes)?;
    let mut trainer = Trainer::new(model, settings)?;
    let report = trainer.run(&train, &valid)?;
    for r in &report.rows {
        println!(
            "epoch {:3}  loss {:.4}  valid_err {:.4}  s_e {:.4}  lambda {:.3}  wall {:.0}ms",
            r.epoch, r.train_loss, r.valid_error, r.s_e, r.lambda, r.wall_ms
        );
    }

    let eval_set = if test.is_empty() { &valid } else { &test };
    let test_eval = evaluate(&trainer.model, eval_set, cfg.batch)?;
    let summary = TrainSummary {
        unit: cfg.unit.clone(),
        seed: cfg.seed,
        epochs_run: report.rows.len(),
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        final_train_loss: report.rows.last().map(|r| r.train_loss).unwrap_or(0.0),
        best_valid_error: report.best_valid_error,
        test_error: test_eval.error_rate,
        test_sparsity: test_eval.s_e,
        mac_ratio: mac_ratio(&test_eval.macs),
        lambda: trainer.lambda(),
        threshold: trainer.model.layer.threshold,
    };
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    save_checkpoint(&out_dir.join("checkpoint.json"), &trainer.model)?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "done: best_valid_err {:.4} (epoch {}) test_err {:.4} sparsity {:.4} mac_ratio {:.4}",
        summary.best_valid_error,
        summary.best_epoch,
        summary.test_error,
        summary.test_sparsity,
        summary.mac_ratio
    );
    Ok(0)
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    checkpoint: String,
    error_rate: f64,
    mean_loss: f64,
    s_e: f64,
    mac_ratio: f64,
    macs: MacCount,
}

fn cmd_evaluate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<i32> {
    if cfg.checkpoint.is_empty() {
        return Err(Error::Config("evaluate needs checkpoint = <path>".into()));
    }
    let model = load_checkpoint(Path::new(&cfg.checkpoint))?;
    let test = cfg.load_eval_dataset()?;
    if model.layer.d() != test.dim() || model.classes() != test.classes {
        return Err(Error::Config(format!(
            "checkpoint expects {}-dim input with {} classes, dataset has {} and {}",
            model.layer.d(),
            model.classes(),
            test.dim(),
            test.classes
        )));
    }
    let eval: EvalResult = evaluate(&model, &test, cfg.batch)?;
    let summary = EvalSummary {
        checkpoint: cfg.checkpoint.clone(),
        error_rate: eval.error_rate,
        mean_loss: eval.mean_loss,
        s_e: eval.s_e,
        mac_ratio: mac_ratio(&eval.macs),
        macs: eval.macs,
    };
    fs::write(out_dir.join("evaluation.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "evaluate: error {:.4} loss {:.4} sparsity {:.4} mac_ratio {:.4} on {} examples",
        eval.error_rate,
        eval.mean_loss,
        eval.s_e,
        mac_ratio(&eval.macs),
        test.len()
    );
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("base.cfg");
        std::fs::write(&cfg_path, "unit = sts\nbatch = 64\nseed = 9\n").unwrap();
        let cli = parse(&[
            "stogate",
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--batch",
            "8",
        ]);
        let mut cfg = ExperimentConfig::default();
        cfg.load_file(cli.config.as_ref().unwrap()).unwrap();
        cli.command.overrides().apply(&mut cfg).unwrap();
        assert_eq!(cfg.unit, "sts");
        assert_eq!(cfg.batch, 8);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn auto_valued_flags_parse() {
        let cli = parse(&[
            "stogate",
            "train",
            "--lr-gater",
            "auto",
            "--momentum",
            "0.25",
            "--gater-bias-init",
            "-1.5",
        ]);
        let mut cfg = ExperimentConfig::default();
        cfg.lr_gater = 0.5;
        cli.command.overrides().apply(&mut cfg).unwrap();
        assert_eq!(cfg.lr_gater, -1.0);
        assert_eq!(cfg.momentum, 0.25);
        assert_eq!(cfg.gater_bias_init, -1.5);
    }

    #[test]
    fn unknown_unit_is_rejected_before_compute() {
        let cli = parse(&["stogate", "train", "--unit", "quantum", "--out", "/dev/null"]);
        let mut cfg = ExperimentConfig::default();
        cli.command.overrides().apply(&mut cfg).unwrap();
        assert!(cmd_train(&cfg, Path::new("/tmp")).is_err());
    }

    #[test]
    fn verify_subcommand_writes_report_and_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("v");
        let cli = parse(&[
            "stogate",
            "verify",
            "--unbiasedness-problems",
            "2",
            "--mc-samples",
            "20000",
            "--rect-samples",
            "50000",
            "--st-trials",
            "100",
            "--out",
            out.to_str().unwrap(),
        ]);
        let code = run(&cli).unwrap();
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(out.join("verify.json")).unwrap();
        assert!(text.contains("unbiasedness/enumeration/problem-00"));
        assert!(out.join("effective_config.cfg").exists());

        // injected estimator bias must flip the exit code
        let cli = parse(&[
            "stogate",
            "verify",
            "--unbiasedness-problems",
            "2",
            "--mc-samples",
            "20000",
            "--rect-samples",
            "50000",
            "--st-trials",
            "100",
            "--estimator-bias",
            "0.1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(run(&cli).unwrap(), 1);
    }

    #[test]
    fn bench_subcommand_writes_grid_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("b");
        let cli = parse(&[
            "stogate",
            "bench-variance",
            "--mc-samples",
            "5000",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(run(&cli).unwrap(), 0);
        let text = std::fs::read_to_string(out.join("bench_variance.csv")).unwrap();
        assert_eq!(text.lines().count(), 42);
        assert!(text.starts_with("baseline,exact_variance,mc_variance\n"));
    }

    #[test]
    fn train_and_evaluate_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t");
        let cli = parse(&[
            "stogate",
            "train",
            "--unit",
            "st",
            "--synth-n",
            "120",
            "--synth-classes",
            "3",
            "--synth-d",
            "5",
            "--bottleneck",
            "4",
            "--gates",
            "12",
            "--epochs",
            "3",
            "--batch",
            "16",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(run(&cli).unwrap(), 0);
        for f in ["report.csv", "checkpoint.json", "summary.json", "effective_config.cfg"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["unit"], "st");
        assert_eq!(summary["epochs_run"], 3);

        let eval_out = dir.path().join("e");
        let ckpt = out.join("checkpoint.json");
        let cli = parse(&[
            "stogate",
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--synth-n",
            "120",
            "--synth-classes",
            "3",
            "--synth-d",
            "5",
            "--seed",
            "5",
            "--out",
            eval_out.to_str().unwrap(),
        ]);
        assert_eq!(run(&cli).unwrap(), 0);
        let eval: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(eval_out.join("evaluation.json")).unwrap())
                .unwrap();
        assert!(eval["error_rate"].as_f64().unwrap() <= 1.0);
    }

    #[test]
    fn evaluate_without_checkpoint_is_a_config_error() {
        let cli = parse(&["stogate", "evaluate", "--out", "/tmp/x"]);
        let mut cfg = ExperimentConfig::default();
        cli.command.overrides().apply(&mut cfg).unwrap();
        assert!(matches!(cmd_evaluate(&cfg, Path::new("/tmp")), Err(Error::Config(_))));
    }
}
