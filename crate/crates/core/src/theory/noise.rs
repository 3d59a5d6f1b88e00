//! Presence between noisy descriptors with correlated branch noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cosine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    /// Correlation between the source and target noise.
    pub rho: f64,
    pub trials: usize,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma = {} must be finite and >= 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Domain(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if self.trials == 0 {
            return Err(Error::Domain("at least one trial is required".into()));
        }
        Ok(())
    }

    /// Whether the ratio-of-expectations formula can be expected to hold closely.
    pub fn in_concentration_regime(&self, dim: usize) -> bool {
        self.trials >= 1000 && dim >= 1024
    }
}

fn check_pair(src: &[f64], tgt: &[f64]) -> Result<()> {
    if src.len() != tgt.len() {
        return Err(Error::shape(src.len(), tgt.len()));
    }
    if src.is_empty() {
        return Err(Error::Domain("descriptors must be nonempty".into()));
    }
    Ok(())
}

/// `(⟨S_t, S_s⟩ + ρσ²D) / √((‖S_t‖² + σ²D)(‖S_s‖² + σ²D))`.
pub fn robust_presence_formula(src: &[f64], tgt: &[f64], sigma: f64, rho: f64) -> Result<f64> {
    check_pair(src, tgt)?;
    let noise = sigma * sigma * src.len() as f64;
    let dot: f64 = src.iter().zip(tgt).map(|(a, b)| a * b).sum();
    let ss: f64 = src.iter().map(|a| a * a).sum();
    let tt: f64 = tgt.iter().map(|a| a * a).sum();
    let den = ((tt + noise) * (ss + noise)).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((dot + rho * noise) / den)
}

/// Mean cosine of `S_t + N_t` against `S_s + N_s` where `N_s = σ z₁` and
/// `N_t = σ(ρ z₁ + √(1 − ρ²) z₂)`. Trial `k` draws from its own stream of
/// `seed`, so the result is independent of the thread count.
pub fn noisy_presence_mc(src: &[f64], tgt: &[f64], noise: &NoiseSpec, seed: u64) -> Result<f64> {
    check_pair(src, tgt)?;
    noise.validate()?;
    if noise.sigma == 0.0 {
        return Ok(cosine(tgt, src));
    }
    let (sigma, rho) = (noise.sigma, noise.rho);
    let indep = (1.0 - rho * rho).sqrt();
    let per_trial: Vec<f64> = (0..noise.trials)
        .into_par_iter()
        .map_init(
            || (vec![0.0; src.len()], vec![0.0; src.len()]),
            |(ns, nt), k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                for ((a, b), (s, t)) in ns.iter_mut().zip(nt.iter_mut()).zip(src.iter().zip(tgt)) {
                    let z1: f64 = StandardNormal.sample(&mut rng);
                    let z2: f64 = StandardNormal.sample(&mut rng);
                    *a = s + sigma * z1;
                    *b = t + sigma * (rho * z1 + indep * z2);
                }
                cosine(nt, ns)
            },
        )
        .collect();
    Ok(per_trial.iter().sum::<f64>() / per_trial.len() as f64)
}
