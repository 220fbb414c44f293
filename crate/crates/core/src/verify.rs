//! Verification suites for the estimator theory: unbiasedness of the
//! score-function estimator, the minimum-variance baseline, the noisy
//! rectifier's closed-form statistics, the two-atom unit's exactness and
//! smooth-function residual, and the straight-through sign property. Each
//! suite pits an implementation against an independent oracle (full
//! enumeration or closed form) and reports structured pass/fail records.

use serde::{Deserialize, Serialize};

use crate::math::{label, sigm, sigm_deriv, softplus, RngStream};
use crate::oracle::{exact_estimator_moments, exact_grad, mc_estimator_stats, EnumerableProblem};
use crate::units::sts_expect;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The quantity under test (a deviation, a ratio, a count).
    pub measured: f64,
    /// What the quantity should be (usually 0 for deviations).
    pub expected: f64,
    /// Maximum |measured - expected| for a pass.
    pub tolerance: f64,
}

impl CheckResult {
    fn within(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            passed: (measured - expected).abs() <= tolerance && measured.is_finite(),
            measured,
            expected,
            tolerance,
        }
    }

    fn assert_true(name: impl Into<String>, passed: bool, measured: f64) -> CheckResult {
        CheckResult { name: name.into(), passed, measured, expected: 1.0, tolerance: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StCounterexample {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub a: f64,
    pub exact_grad: f64,
    pub st_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub st_counterexamples: Vec<StCounterexample>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifySettings {
    pub seed: u64,
    pub unbiasedness_problems: usize,
    pub mc_samples: usize,
    pub rect_samples: usize,
    pub st_trials: usize,
    /// Test hook: additive bias injected into the score-function estimator.
    /// Any nonzero value must make the unbiasedness suite fail.
    pub estimator_bias: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            seed: 0,
            unbiasedness_problems: 25,
            mc_samples: 1_000_000,
            rect_samples: 1_000_000,
            st_trials: 100,
            estimator_bias: 0.0,
        }
    }
}

/// A random smooth loss over k gates: quadratic with Gaussian coefficients.
fn random_quadratic_problem(rng: &mut RngStream, k: usize) -> Result<EnumerableProblem> {
    let a: Vec<f64> = (0..k).map(|_| 4.0 * rng.next_f64() - 2.0).collect();
    let gamma = rng.gaussian(0.0, 1.0);
    let linear: Vec<f64> = (0..k).map(|_| rng.gaussian(0.0, 1.0)).collect();
    let quad: Vec<f64> = (0..k * k).map(|_| rng.gaussian(0.0, 0.5)).collect();
    EnumerableProblem::from_activations(a, move |h: &[f64]| {
        let mut l = gamma;
        for (i, &hi) in h.iter().enumerate() {
            l += linear[i] * hi;
            for (j, &hj) in h.iter().enumerate() {
                l += quad[i * h.len() + j] * hi * hj;
            }
        }
        l
    })
}

/// Unbiasedness of (h - sigm(a))·L: across random problems, the
/// enumeration-exact mean of the estimator must equal the exact gradient,
/// and the Monte Carlo mean must land within 4 standard errors.
pub fn unbiasedness_suite(settings: &VerifySettings) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let rng = RngStream::new(settings.seed, label("unbiasedness"));
    let bias = settings.estimator_bias;
    for idx in 0..settings.unbiasedness_problems {
        let k = idx % 3 + 1;
        let problem = random_quadratic_problem(&mut rng.derive(idx as u64), k)
            .expect("k is always within the enumeration bound");
        let a = problem.activations();
        let mut worst_enum = 0.0f64;
        let mut worst_mc_se = 0.0f64;
        for unit in 0..k {
            let exact = exact_grad(&problem, unit);
            let mut estimator =
                |s: &crate::oracle::GateSample| (s.h[unit] - sigm(a[unit])) * s.loss + bias;
            let (enum_mean, _) = exact_estimator_moments(&problem, &mut estimator);
            worst_enum = worst_enum.max((enum_mean - exact).abs());

            let mut mc_rng = rng.derive(1000 + (idx * 8 + unit) as u64);
            let stats =
                mc_estimator_stats(&problem, settings.mc_samples, &mut mc_rng, &mut estimator);
            if stats.se > 0.0 {
                worst_mc_se = worst_mc_se.max((stats.mean - exact).abs() / stats.se);
            }
        }
        checks.push(CheckResult::within(
            format!("unbiasedness/enumeration/problem-{idx:02}"),
            worst_enum,
            0.0,
            1e-10,
        ));
        checks.push(CheckResult::within(
            format!("unbiasedness/monte-carlo/problem-{idx:02}"),
            worst_mc_se,
            0.0,
            4.0,
        ));
    }
    checks
}

/// The canonical single-gate benchmark: L(h) = h at a = 0.
fn canonical_problem() -> EnumerableProblem {
    EnumerableProblem::from_activations(vec![0.0], |h: &[f64]| h[0]).unwrap()
}

fn centered_variance(problem: &EnumerableProblem, baseline: f64) -> f64 {
    let a = problem.activations();
    let mut est = |s: &crate::oracle::GateSample| (s.h[0] - sigm(a[0])) * (s.loss - baseline);
    exact_estimator_moments(problem, &mut est).1
}

/// Enumeration of the optimal baseline: E[(h-p)² L] / E[(h-p)²].
pub fn optimal_baseline(problem: &EnumerableProblem) -> f64 {
    let a = problem.activations();
    let mut num_est = |s: &crate::oracle::GateSample| {
        let c = s.h[0] - sigm(a[0]);
        c * c * s.loss
    };
    let (num, _) = exact_estimator_moments(problem, &mut num_est);
    let mut den_est = |s: &crate::oracle::GateSample| {
        let c = s.h[0] - sigm(a[0]);
        c * c
    };
    let (den, _) = exact_estimator_moments(problem, &mut den_est);
    num / den
}

pub const BASELINE_GRID_POINTS: usize = 41;

/// The 41-point grid over [-1, 2] used by the baseline sweep. Index 20
/// lands exactly on 0.5.
pub fn baseline_grid() -> Vec<f64> {
    (0..BASELINE_GRID_POINTS).map(|i| -1.0 + 3.0 * i as f64 / 40.0).collect()
}

/// Minimum-variance baseline: on the canonical problem the grid minimum
/// sits exactly at 0.5, matching the closed form, and centering at the
/// optimum beats the uncentered estimator for non-constant losses.
pub fn optimal_baseline_suite(settings: &VerifySettings) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let problem = canonical_problem();
    let grid = baseline_grid();
    let variances: Vec<f64> = grid.iter().map(|&b| centered_variance(&problem, b)).collect();
    let argmin = variances
        .iter()
        .enumerate()
        .min_by(|(_, x), (_, y)| x.total_cmp(y))
        .map(|(i, _)| i)
        .unwrap();
    checks.push(CheckResult::within("optimal-baseline/grid-minimum-at-half", grid[argmin], 0.5, 0.0));
    let closed_form = optimal_baseline(&problem);
    checks.push(CheckResult::within("optimal-baseline/closed-form-ratio", closed_form, 0.5, 1e-10));

    // convexity of the exact variance curve (quadratic in the baseline)
    let convex = variances.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] >= -1e-12);
    checks.push(CheckResult::assert_true(
        "optimal-baseline/variance-curve-convex",
        convex,
        if convex { 1.0 } else { 0.0 },
    ));

    // centered beats uncentered on random non-constant problems
    let rng = RngStream::new(settings.seed, label("optimal-baseline"));
    let mut strict = true;
    let mut worst_gap = f64::INFINITY;
    for t in 0..8u64 {
        let p = random_quadratic_problem(&mut rng.derive(t), 1).unwrap();
        if (p.loss_at(&[1.0]) - p.loss_at(&[0.0])).abs() < 1e-9 {
            continue;
        }
        let opt = optimal_baseline(&p);
        let gap = centered_variance(&p, 0.0) - centered_variance(&p, opt);
        worst_gap = worst_gap.min(gap);
        strict &= gap > 0.0;
    }
    checks.push(CheckResult::assert_true(
        "optimal-baseline/centered-beats-uncentered",
        strict,
        worst_gap,
    ));
    checks
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchRow {
    pub baseline: f64,
    pub exact_variance: f64,
    pub mc_variance: f64,
}

/// Baseline sweep on the canonical problem: exact variance by enumeration
/// next to a Monte Carlo estimate, one row per grid point.
pub fn bench_variance(seed: u64, mc_samples: usize, grid: &[f64]) -> Vec<BenchRow> {
    let problem = canonical_problem();
    let a = problem.activations();
    let rng = RngStream::new(seed, label("bench-variance"));
    grid.iter()
        .enumerate()
        .map(|(i, &b)| {
            let mut est =
                |s: &crate::oracle::GateSample| (s.h[0] - sigm(a[0])) * (s.loss - b);
            let exact = exact_estimator_moments(&problem, &mut est).1;
            let stats =
                mc_estimator_stats(&problem, mc_samples, &mut rng.derive(i as u64), &mut est);
            BenchRow { baseline: b, exact_variance: exact, mc_variance: stats.variance }
        })
        .collect()
}

pub const BENCH_CSV_HEADER: &str = "baseline,exact_variance,mc_variance";

pub fn bench_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.baseline, r.exact_variance, r.mc_variance));
    }
    out
}

/// Noisy rectifier closed forms under logistic noise: P(h>0) = sigm(a) and
/// E[h] = softplus(a), each within 5 standard errors at the configured
/// sample count.
pub fn rectifier_stats_suite(settings: &VerifySettings) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let n = settings.rect_samples;
    for (i, &a) in [-2.0, 0.0, 2.0].iter().enumerate() {
        let mut rng = RngStream::new(settings.seed, label("rectifier-stats")).derive(i as u64);
        let mut active = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for t in 0..n {
            let h = (a + rng.logistic()).max(0.0);
            if h > 0.0 {
                active += 1;
            }
            let delta = h - mean;
            mean += delta / (t + 1) as f64;
            m2 += delta * (h - mean);
        }
        let p = sigm(a);
        let p_hat = active as f64 / n as f64;
        let p_se = (p * (1.0 - p) / n as f64).sqrt();
        checks.push(CheckResult::within(
            format!("rectifier-stats/activation-probability/a={a}"),
            p_hat,
            p,
            5.0 * p_se,
        ));
        let h_se = (m2 / (n - 1) as f64 / n as f64).sqrt();
        checks.push(CheckResult::within(
            format!("rectifier-stats/mean-output/a={a}"),
            mean,
            softplus(a),
            5.0 * h_se,
        ));
    }
    checks
}

/// Two-atom unit: E[h] = sigm(a) and P(h>0) = sqrt(sigm(a)) exactly, and
/// the smooth-function residual |E[f(h)] - f(p)| / P(h>0) for f(x) = x²
/// shrinks strictly as the unit grows sparse.
pub fn sts_moments_suite() -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let mut worst_mean = 0.0f64;
    let mut worst_prob = 0.0f64;
    for &a in &[-1.0, -2.0, -4.0, 0.5, 2.0] {
        let p = sigm(a);
        worst_mean = worst_mean.max((sts_expect(a, |h| h) - p).abs());
        let prob = sts_expect(a, |h| if h > 0.0 { 1.0 } else { 0.0 });
        worst_prob = worst_prob.max((prob - p.sqrt()).abs());
    }
    checks.push(CheckResult::within("sts-moments/mean-equals-sigmoid", worst_mean, 0.0, 1e-12));
    checks.push(CheckResult::within("sts-moments/firing-prob-equals-sqrt", worst_prob, 0.0, 1e-12));

    let residual = |a: f64| {
        let p = sigm(a);
        (sts_expect(a, |h| h * h) - p * p).abs() / p.sqrt()
    };
    let rs: Vec<f64> = [-2.0, -4.0, -6.0, -8.0].iter().map(|&a| residual(a)).collect();
    let decreasing = rs.windows(2).all(|w| w[1] < w[0]);
    checks.push(CheckResult::assert_true(
        "sts-moments/residual-strictly-decreasing",
        decreasing,
        if decreasing { 1.0 } else { 0.0 },
    ));
    checks.push(CheckResult::within("sts-moments/residual-at-a=-8", rs[3], 0.0, 0.02));
    checks
}

/// Straight-through sign property: the expected plain ST estimate agrees
/// in sign with the exact gradient on at least 95 of 100 random quadratic
/// problems; each disagreement is recorded.
pub fn st_sign_suite(settings: &VerifySettings) -> (Vec<CheckResult>, Vec<StCounterexample>) {
    let mut counterexamples = Vec::new();
    let mut agreements = 0usize;
    let root = RngStream::new(settings.seed, label("st-sign"));
    let mut produced = 0usize;
    let mut attempt = 0u64;
    while produced < settings.st_trials {
        let mut rng = root.derive(attempt);
        attempt += 1;
        let alpha = rng.gaussian(0.0, 1.0);
        let beta = rng.gaussian(0.0, 1.0);
        let gamma = rng.gaussian(0.0, 1.0);
        let a = rng.next_f64() - 0.5;
        // L(h) = alpha h² + beta h + gamma; over h in {0,1}: L(1)-L(0) = alpha+beta
        let exact = sigm_deriv(a) * (alpha + beta);
        if exact.abs() <= 1e-4 {
            continue;
        }
        produced += 1;
        // plain ST passes dL/dh straight through: E[2 alpha h + beta]
        let st_mean = 2.0 * alpha * sigm(a) + beta;
        if (st_mean > 0.0) == (exact > 0.0) && st_mean != 0.0 {
            agreements += 1;
        } else {
            counterexamples.push(StCounterexample {
                alpha,
                beta,
                gamma,
                a,
                exact_grad: exact,
                st_mean,
            });
        }
    }
    let check = CheckResult {
        name: "st-sign/agreement-count".into(),
        passed: agreements * 100 >= 95 * settings.st_trials,
        measured: agreements as f64,
        expected: settings.st_trials as f64,
        tolerance: 0.05 * settings.st_trials as f64,
    };
    (vec![check], counterexamples)
}

/// Run every suite and collect a single report.
pub fn run_all(settings: &VerifySettings) -> VerifyReport {
    let mut checks = Vec::new();
    checks.extend(unbiasedness_suite(settings));
    checks.extend(optimal_baseline_suite(settings));
    checks.extend(rectifier_stats_suite(settings));
    checks.extend(sts_moments_suite());
    let (st_checks, counterexamples) = st_sign_suite(settings);
    checks.extend(st_checks);
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { seed: settings.seed, passed, checks, st_counterexamples: counterexamples }
}
