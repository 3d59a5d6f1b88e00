//! KL-regularized reweighting of one attention row and the gates it induces.

use serde::{Deserialize, Serialize};

use crate::attention::{SuppressionVector, ROW_SUM_TOLERANCE};
use crate::error::{Error, Result};

fn check_presence(p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("presence {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("beta = {beta} must be finite and >= 0")));
    }
    Ok(())
}

/// Minimizer of `KL(q ‖ SA) + β Σ q_j p(j)`: `q_j ∝ SA_j exp(−β p(j))`.
pub fn kl_optimal_row(row: &[f64], p: &[f64], beta: f64) -> Result<Vec<f64>> {
    if row.len() != p.len() {
        return Err(Error::shape(row.len(), p.len()));
    }
    if row.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain("attention row must be nonnegative".into()));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::Domain(format!("attention row sums to {sum}")));
    }
    check_presence(p)?;
    check_beta(beta)?;
    let p_min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if beta == 0.0 || p.iter().all(|&v| v == p_min) {
        return Ok(row.to_vec());
    }
    // Shifting by the smallest score keeps the largest factor at 1.
    let weighted: Vec<f64> = row
        .iter()
        .zip(p)
        .map(|(&a, &v)| a * (-beta * (v - p_min)).exp())
        .collect();
    let z: f64 = weighted.iter().sum();
    if z == 0.0 {
        return Err(Error::Domain("reweighted row has no mass".into()));
    }
    Ok(weighted.into_iter().map(|w| w / z).collect())
}

/// `η(j) = exp(−β p(j))`, the gate the reweighting corresponds to.
pub fn exponential_gate(p: &[f64], beta: f64) -> Result<SuppressionVector> {
    check_presence(p)?;
    check_beta(beta)?;
    SuppressionVector::new(p.iter().map(|&v| (-beta * v).exp()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingReport {
    pub beta: f64,
    /// Adjacent pairs (in presence order) with distinct presence.
    pub pairs_checked: usize,
    pub exponential_violations: usize,
    pub linear_violations: usize,
    /// Both gates equal 1 wherever `p = 0`.
    pub boundary_exact: bool,
    /// `max |(1 − p) − exp(−βp)|` over the inputs.
    pub max_gap: f64,
    pub argmax_p: f64,
    /// The same gap after rescaling the exponential gate onto `[0, 1]`.
    pub max_gap_rescaled: f64,
}

impl GatingReport {
    pub fn consistent(&self) -> bool {
        self.exponential_violations == 0 && self.linear_violations == 0 && self.boundary_exact
    }
}

/// Checks that `exp(−βp)` and `1 − p` rank tokens identically.
///
/// Both gates are strictly decreasing in `p`, so sorting by presence and
/// checking neighbours covers every pair by transitivity.
pub fn gating_consistency(p: &[f64], beta: f64) -> Result<GatingReport> {
    check_presence(p)?;
    check_beta(beta)?;
    let exp_gate = |v: f64| (-beta * v).exp();
    let lin_gate = |v: f64| 1.0 - v;
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut pairs, mut exp_bad, mut lin_bad) = (0, 0, 0);
    for w in sorted.windows(2) {
        if w[0] < w[1] {
            pairs += 1;
            exp_bad += usize::from(exp_gate(w[0]) <= exp_gate(w[1]));
            lin_bad += usize::from(lin_gate(w[0]) <= lin_gate(w[1]));
        }
    }
    let floor = exp_gate(1.0);
    let rescale = |v: f64| {
        if floor < 1.0 {
            (exp_gate(v) - floor) / (1.0 - floor)
        } else {
            lin_gate(v)
        }
    };
    let (mut max_gap, mut argmax_p, mut max_gap_rescaled) = (0.0f64, 0.0, 0.0f64);
    for &v in p {
        let gap = (lin_gate(v) - exp_gate(v)).abs();
        if gap > max_gap {
            max_gap = gap;
            argmax_p = v;
        }
        max_gap_rescaled = max_gap_rescaled.max((lin_gate(v) - rescale(v)).abs());
    }
    let boundary_exact = p
        .iter()
        .filter(|&&v| v == 0.0)
        .all(|&v| exp_gate(v) == 1.0 && lin_gate(v) == 1.0);
    Ok(GatingReport {
        beta,
        pairs_checked: pairs,
        exponential_violations: exp_bad,
        linear_violations: lin_bad,
        boundary_exact,
        max_gap,
        argmax_p,
        max_gap_rescaled,
    })
}
