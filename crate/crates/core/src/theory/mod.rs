//! Numerical checks of the presence and suppression model: mixture
//! behaviour, robustness to correlated noise, and the KL form of the gate.

pub mod curves;
pub mod kl;
pub mod mixture;
pub mod noise;
pub mod report;

pub use curves::{presence_curve_experiment, CurveScenario, CurveTable, LayerCurve};
pub use kl::{exponential_gate, gating_consistency, kl_optimal_row, GatingReport};
pub use mixture::{empirical_presence, g_theory, MixtureSpec};
pub use noise::{noisy_presence_mc, robust_presence_formula, NoiseSpec};
pub use report::{run_verification, CheckResult, VerificationReport, VerifyOptions};

/// Plain cosine, unclamped; zero if either vector vanishes.
pub(crate) fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    let den = (uu * vv).sqrt();
    if den == 0.0 {
        0.0
    } else {
        dot / den
    }
}
