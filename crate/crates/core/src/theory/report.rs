//! Runs every numerical check and collects a text/JSON report.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::curves::{presence_curve_experiment, CurveScenario, CurveTable};
use super::kl::{exponential_gate, gating_consistency, kl_optimal_row};
use super::mixture::{empirical_presence, g_theory, MixtureSpec};
use super::noise::{noisy_presence_mc, robust_presence_formula, NoiseSpec};
use crate::attention::{logit_shift_softmax, row_softmax, AttentionLogits, Branch, LayerId};
use crate::backend::ToySpec;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub grid_points: usize,
    pub noise_dim: usize,
    pub noise_trials: usize,
    pub beta: f64,
    /// Include the toy presence-curve runs.
    pub curves: bool,
    pub curve_steps: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_points: 10_000,
            noise_dim: 8192,
            noise_trials: 4000,
            beta: 1.0,
            curves: true,
            curve_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured error or statistic the check thresholds.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<28} measured={:.3e} tol={:.1e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.detail
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(out, "{} checks, {failed} failed", self.checks.len());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const NORM_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];

/// Monotonicity, exactness at `κ = 0`, and the equal-norm midpoint.
pub fn check_mixture(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let n = opts.grid_points.max(2);
    let mut min_step = f64::INFINITY;
    let mut max_exact = 0.0f64;
    for ratio in NORM_RATIOS {
        let mut prev = g_theory(&MixtureSpec::new(0.0, ratio, 1.0))?;
        for k in 1..n {
            let spec = MixtureSpec::new(k as f64 / (n - 1) as f64, ratio, 1.0);
            let g = g_theory(&spec)?;
            min_step = min_step.min(g - prev);
            prev = g;
            if k % 97 == 0 || k == n - 1 {
                let e = empirical_presence(&spec, opts.seed ^ k as u64)?;
                max_exact = max_exact.max((e - g).abs());
            }
        }
    }
    let half = g_theory(&MixtureSpec::new(0.5, 1.0, 1.0))?;
    Ok(vec![
        CheckResult {
            name: "mixture_monotone".into(),
            passed: min_step > 0.0,
            measured: min_step,
            tolerance: 0.0,
            detail: format!("smallest grid increment over {n} points, L_s/L_b in {NORM_RATIOS:?}"),
        },
        CheckResult::at_most(
            "mixture_orthogonal_exact",
            max_exact,
            1e-9,
            "explicit orthogonal construction vs closed form".into(),
        ),
        CheckResult::at_most(
            "mixture_equal_norm_midpoint",
            (half - std::f64::consts::FRAC_1_SQRT_2).abs(),
            1e-9,
            "pi = 0.5, L_s = L_b".into(),
        ),
    ])
}

/// Clean descriptor pair used by the noise check: `‖S‖²` comparable to `σ²D`
/// at `σ = 0.5`, and a source/target cosine near 0.6.
pub fn noise_descriptors(dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let src: Vec<f64> = (0..dim).map(|_| 0.5 * draw()).collect();
    let tgt: Vec<f64> = src.iter().map(|s| 0.6 * s + 0.8 * 0.5 * draw()).collect();
    (src, tgt)
}

pub const NOISE_SIGMAS: [f64; 3] = [0.0, 0.5, 2.0];
pub const NOISE_RHOS: [f64; 3] = [0.0, 0.5, 1.0];

pub fn check_noise(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let (src, tgt) = noise_descriptors(opts.noise_dim, opts.seed);
    let mut out = Vec::new();
    for (i, sigma) in NOISE_SIGMAS.into_iter().enumerate() {
        for (j, rho) in NOISE_RHOS.into_iter().enumerate() {
            let spec = NoiseSpec {
                sigma,
                rho,
                trials: opts.noise_trials,
            };
            let mc = noisy_presence_mc(&src, &tgt, &spec, opts.seed ^ ((i * 3 + j) as u64 + 1))?;
            let f = robust_presence_formula(&src, &tgt, sigma, rho)?;
            out.push(CheckResult::at_most(
                &format!("noise_sigma{sigma}_rho{rho}"),
                (mc - f).abs(),
                0.02,
                format!("mc={mc:.5} formula={f:.5} D={} trials={}", opts.noise_dim, opts.noise_trials),
            ));
        }
    }
    Ok(out)
}

/// Identity cases, the worked example, and agreement with the logit-shift softmax.
pub fn check_kl(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut identity = 0.0f64;
    let mut constant = 0.0f64;
    let mut equivalence = 0.0f64;
    for case in 0..200 {
        let n = 2 + case % 31;
        let a: Vec<f64> = (0..n).map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let p: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.5 + 0.3 * z).clamp(0.0, 1.0)
            })
            .collect();
        let beta = 0.25 * (case % 17) as f64;
        let logits = AttentionLogits::new(a, 1, 1, n, LayerId::new("row"), 1)?;
        let sa = row_softmax(&logits, Branch::Target);
        let row = sa.values();
        let max_diff = |x: &[f64], y: &[f64]| {
            x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        identity = identity.max(max_diff(&kl_optimal_row(row, &p, 0.0)?, row));
        constant = constant.max(max_diff(&kl_optimal_row(row, &vec![p[0]; n], beta + 1.0)?, row));
        let shifted = logit_shift_softmax(&logits, &exponential_gate(&p, beta)?, Branch::Target)?;
        equivalence = equivalence.max(max_diff(&kl_optimal_row(row, &p, beta)?, shifted.values()));
    }
    let q = kl_optimal_row(&[0.5, 0.5], &[1.0, 0.0], 4f64.ln())?;
    let worked = (q[0] - 0.2).abs().max((q[1] - 0.8).abs());
    Ok(vec![
        CheckResult::at_most("kl_beta_zero_identity", identity, 0.0, "200 random rows".into()),
        CheckResult::at_most("kl_constant_presence", constant, 1e-12, "200 random rows".into()),
        CheckResult::at_most(
            "kl_worked_example",
            worked,
            1e-12,
            format!("[0.5, 0.5], p = [1, 0], beta = ln 4 -> [{:.15}, {:.15}]", q[0], q[1]),
        ),
        CheckResult::at_most(
            "kl_logit_shift_equivalence",
            equivalence,
            1e-9,
            "eta = exp(-beta p) through the logit-shift softmax".into(),
        ),
    ])
}

pub fn check_gating(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let n = opts.grid_points.max(2);
    let grid: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    let r = gating_consistency(&grid, opts.beta)?;
    Ok(vec![CheckResult {
        name: "gating_ordering".into(),
        passed: r.consistent(),
        measured: (r.exponential_violations + r.linear_violations) as f64,
        tolerance: 0.0,
        detail: format!(
            "beta={} pairs={} max|(1-p)-exp(-beta p)|={:.5} at p={:.4}, rescaled gap={:.5}",
            r.beta, r.pairs_checked, r.max_gap, r.argmax_p, r.max_gap_rescaled
        ),
    }])
}

/// Toy presence curves: decline toward an orthogonal field, flat control,
/// and distinct per-layer curves.
pub fn check_curves(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let spec = ToySpec {
        seed: opts.seed,
        ..ToySpec::default()
    };
    let pull = presence_curve_experiment(&spec, CurveScenario::Orthogonal, opts.curve_steps)?;
    let control = presence_curve_experiment(&spec, CurveScenario::Control, opts.curve_steps)?;
    let mean = pull.overall_mean();
    let rise = CurveTable::first_half_rise(&mean);
    let layer_rise = pull
        .layers
        .iter()
        .map(|l| CurveTable::first_half_rise(&l.region_mean))
        .fold(0.0, f64::max);
    let (first, last) = (mean[0], mean[mean.len() - 1]);
    Ok(vec![
        CheckResult::at_most(
            "curve_first_half_decline",
            rise.max(layer_rise),
            0.0,
            format!(
                "layer-averaged region mean {first:.4} -> {last:.4}; rise {rise:.1e} averaged, {layer_rise:.1e} worst layer"
            ),
        ),
        CheckResult::at_most(
            "curve_control_flat",
            control.max_deviation_from_one(),
            0.02,
            "largest |1 - p| of the no-change control".into(),
        ),
        CheckResult {
            name: "curve_layers_distinct".into(),
            passed: pull.layers_distinct(),
            measured: pull.min_layer_separation(),
            tolerance: super::curves::DISTINCT_CURVE_EPS,
            detail: format!("{} layers", pull.layers.len()),
        },
    ])
}

pub fn run_verification(opts: &VerifyOptions) -> Result<VerificationReport> {
    let mut checks = check_mixture(opts)?;
    checks.extend(check_noise(opts)?);
    checks.extend(check_kl(opts)?);
    checks.extend(check_gating(opts)?);
    if opts.curves {
        checks.extend(check_curves(opts)?);
    }
    Ok(VerificationReport { checks })
}
