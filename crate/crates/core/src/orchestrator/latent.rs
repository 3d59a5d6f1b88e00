//! Noise schedule, forward diffusion and foreground/background blending.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mask::TokenMask;
use crate::attention::Branch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cumulative signal retention `ᾱ_t` for inference timesteps `t = 1..=T`.
///
/// `ᾱ_0` is taken to be 1 (the clean latent).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(v) = alpha_bar.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidInput(format!("alpha_bar value {v} outside (0, 1]")));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput(
                "alpha_bar must be non-increasing in t".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    /// Scaled-linear betas over `train_steps`, subsampled to `steps`
    /// inference timesteps. Inference step `t` reads training index
    /// `⌊t · train / steps⌋ − 1`, so `t = T` lands on the last training step.
    pub fn scaled_linear(train_steps: usize, beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if train_steps < 2 || steps == 0 {
            return Err(Error::Config(format!(
                "invalid schedule: {train_steps} training steps, {steps} inference steps"
            )));
        }
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let mut cumulative = Vec::with_capacity(train_steps);
        let mut prod = 1.0;
        for i in 0..train_steps {
            let b = s + (e - s) * i as f64 / (train_steps - 1) as f64;
            prod *= 1.0 - b * b;
            cumulative.push(prod);
        }
        let alpha_bar = (1..=steps)
            .map(|t| {
                let idx = (t * train_steps / steps).max(1) - 1;
                cumulative[idx]
            })
            .collect();
        Self::new(alpha_bar)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alpha_bar
            .get(t - 1)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("timestep {t} outside 1..={}", self.steps())))
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// A latent tensor tagged with its timestep and branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub tensor: Tensor,
    pub timestep: usize,
    pub branch: Branch,
}

impl LatentState {
    pub fn new(tensor: Tensor, timestep: usize, branch: Branch) -> Self {
        Self {
            tensor,
            timestep,
            branch,
        }
    }

    /// The clean source latent `x_0`.
    pub fn clean(tensor: Tensor) -> Self {
        Self::new(tensor, 0, Branch::Source)
    }

    pub fn bitwise_eq(&self, other: &LatentState) -> bool {
        self.tensor.shape() == other.tensor.shape()
            && self
                .tensor
                .as_slice()
                .iter()
                .zip(other.tensor.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Fixed-noise-level alternatives for the reference branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceScheme {
    /// Reference noised to the current timestep `t`.
    #[default]
    Matched,
    /// Always `x_1`.
    First,
    /// Always `x_T`.
    Last,
    /// Always `x_⌊T/2⌋` (at least 1).
    Mid,
}

impl ReferenceScheme {
    pub const ALL: [ReferenceScheme; 4] = [
        ReferenceScheme::Matched,
        ReferenceScheme::First,
        ReferenceScheme::Last,
        ReferenceScheme::Mid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReferenceScheme::Matched => "matched",
            ReferenceScheme::First => "first",
            ReferenceScheme::Last => "last",
            ReferenceScheme::Mid => "mid",
        }
    }

    /// Timestep the reference is noised to while denoising step `t` of `total`.
    pub fn reference_timestep(self, t: usize, total: usize) -> usize {
        match self {
            ReferenceScheme::Matched => t,
            ReferenceScheme::First => 1,
            ReferenceScheme::Last => total,
            ReferenceScheme::Mid => (total / 2).max(1),
        }
    }
}

impl fmt::Display for ReferenceScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReferenceScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(Self::Matched),
            "first" => Ok(Self::First),
            "last" => Ok(Self::Last),
            "mid" => Ok(Self::Mid),
            other => Err(Error::Config(format!(
                "unknown reference scheme `{other}` (expected matched|first|last|mid)"
            ))),
        }
    }
}

/// One standard-normal draw shaped like `like`, fully determined by `seed`.
pub fn draw_noise(channels: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * height * width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::from_vec(channels, height, width, data).expect("length matches shape")
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn forward_diffuse(
    x0: &LatentState,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    x0.tensor.ensure_same_shape(eps)?;
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} outside 1..={}",
            schedule.steps()
        )));
    }
    let a = schedule.alpha_bar(t)?;
    let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
    let (c, h, w) = x0.tensor.shape();
    let data = x0
        .tensor
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| signal * x + noise * e)
        .collect();
    Ok(LatentState::new(
        Tensor::from_vec(c, h, w, data)?,
        t,
        x0.branch,
    ))
}

/// Starting point of the target branch: the source noised to `T`.
pub fn init_target(x0_src: &LatentState, schedule: &NoiseSchedule, eps: &Tensor) -> Result<LatentState> {
    let mut x = forward_diffuse(x0_src, schedule.steps(), eps, schedule)?;
    x.branch = Branch::Target;
    Ok(x)
}

/// Source latent fed to the reference branch while denoising step `t`.
pub fn reference_latent(
    x0_src: &LatentState,
    t: usize,
    scheme: ReferenceScheme,
    schedule: &NoiseSchedule,
    eps: &Tensor,
) -> Result<LatentState> {
    let mut x = forward_diffuse(
        x0_src,
        scheme.reference_timestep(t, schedule.steps()),
        eps,
        schedule,
    )?;
    x.branch = Branch::Source;
    Ok(x)
}

/// Target inside the mask, source outside; exact selection per element.
pub fn blend(tgt: &LatentState, src_ref: &LatentState, mask: &TokenMask) -> Result<LatentState> {
    tgt.tensor.ensure_same_shape(&src_ref.tensor)?;
    if tgt.timestep != src_ref.timestep {
        return Err(Error::InvalidInput(format!(
            "blending latents from timesteps {} and {}",
            tgt.timestep, src_ref.timestep
        )));
    }
    let (c, h, w) = tgt.tensor.shape();
    if mask.grid() != (h, w) {
        return Err(Error::shape(
            format!("{h}x{w} latent mask"),
            format!("{}x{}", mask.grid().0, mask.grid().1),
        ));
    }
    let bits = mask.bits();
    let plane = h * w;
    let t = tgt.tensor.as_slice();
    let s = src_ref.tensor.as_slice();
    let data = (0..c * plane)
        .map(|k| if bits[k % plane] { t[k] } else { s[k] })
        .collect();
    Ok(LatentState::new(
        Tensor::from_vec(c, h, w, data)?,
        tgt.timestep,
        Branch::Target,
    ))
}
