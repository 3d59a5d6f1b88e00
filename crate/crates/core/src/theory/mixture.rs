//! Presence under a linear mixture of object and background descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cosine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Object share of the target descriptor.
    pub pi: f64,
    /// Norm of the object descriptor.
    pub l_s: f64,
    /// Norm of the background descriptor.
    pub l_b: f64,
    /// Normalized inner product between object and background descriptors.
    pub kappa: f64,
    pub dim: usize,
}

impl MixtureSpec {
    pub fn new(pi: f64, l_s: f64, l_b: f64) -> Self {
        Self {
            pi,
            l_s,
            l_b,
            kappa: 0.0,
            dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Domain(format!("pi = {} outside [0, 1]", self.pi)));
        }
        if !(self.l_s > 0.0 && self.l_b > 0.0 && self.l_s.is_finite() && self.l_b.is_finite()) {
            return Err(Error::Domain("descriptor norms must be positive and finite".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Domain(format!("kappa = {} outside [0, 1]", self.kappa)));
        }
        Ok(())
    }
}

/// `π L_s / √(π² L_s² + (1 − π)² L_b²)`.
pub fn g_theory(spec: &MixtureSpec) -> Result<f64> {
    spec.validate()?;
    let a = spec.pi * spec.l_s;
    let b = (1.0 - spec.pi) * spec.l_b;
    if a == 0.0 {
        return Ok(0.0);
    }
    Ok(a / a.hypot(b))
}

/// Orthonormal pair `(u, v)` in `dim` dimensions by Gram-Schmidt on Gaussian draws.
fn orthonormal_pair(dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u = draw();
    normalize(&mut u);
    let mut v = draw();
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    normalize(&mut v);
    (u, v)
}

/// Cosine between the mixture `π s + (1 − π) b` and `s`, with explicit
/// vectors `‖s‖ = L_s`, `‖b‖ = L_b`, `⟨s, b⟩ = κ L_s L_b`.
pub fn empirical_presence(spec: &MixtureSpec, seed: u64) -> Result<f64> {
    spec.validate()?;
    if spec.dim < 2 {
        return Err(Error::Domain("mixture model needs dim >= 2".into()));
    }
    let (u, v) = orthonormal_pair(spec.dim, seed);
    let k = spec.kappa;
    let ortho = (1.0 - k * k).sqrt();
    let s: Vec<f64> = u.iter().map(|x| spec.l_s * x).collect();
    let b: Vec<f64> = u
        .iter()
        .zip(&v)
        .map(|(x, y)| spec.l_b * (k * x + ortho * y))
        .collect();
    let mix: Vec<f64> = s
        .iter()
        .zip(&b)
        .map(|(x, y)| spec.pi * x + (1.0 - spec.pi) * y)
        .collect();
    Ok(cosine(&mix, &s))
}
