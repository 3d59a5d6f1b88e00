//! Presence curves from toy removal runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::LayerId;
use crate::backend::{TargetField, ToyBackend, ToySpec};
use crate::error::{Error, Result};
use crate::orchestrator::{run_removal, CurveRecord, RemovalConfig, TokenRef};
use crate::strategy::StrategyKind;
use crate::tensor::{Image, PixelMask, Tensor};

/// Two curves closer than this everywhere count as the same curve.
pub const DISTINCT_CURVE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveScenario {
    /// The denoiser pulls toward the clean source itself.
    Control,
    /// The denoiser pulls toward a field orthogonal to the source.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub layer: LayerId,
    /// Mean presence over the masked tokens, aligned with `CurveTable::timesteps`.
    pub region_mean: Vec<f64>,
    pub tokens: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub scenario: CurveScenario,
    /// Denoising order, `T` down to 1.
    pub timesteps: Vec<usize>,
    pub layers: Vec<LayerCurve>,
}

impl CurveTable {
    pub fn from_records(scenario: CurveScenario, records: &[CurveRecord]) -> Result<Self> {
        let mut timesteps: Vec<usize> = records.iter().map(|r| r.timestep).collect();
        timesteps.sort_unstable_by(|a, b| b.cmp(a));
        timesteps.dedup();
        let pos: BTreeMap<usize, usize> = timesteps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let n = timesteps.len();

        let mut order: Vec<LayerId> = Vec::new();
        let mut sums: BTreeMap<LayerId, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
        let mut tokens: BTreeMap<LayerId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for r in records {
            if !sums.contains_key(&r.layer_id) {
                order.push(r.layer_id.clone());
            }
            let k = pos[&r.timestep];
            let (s, c) = sums
                .entry(r.layer_id.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0; n]));
            s[k] += r.presence;
            c[k] += 1;
            if let TokenRef::Token(i) = r.token_index {
                tokens
                    .entry(r.layer_id.clone())
                    .or_default()
                    .entry(i)
                    .or_insert_with(|| vec![f64::NAN; n])[k] = r.presence;
            }
        }
        let layers = order
            .into_iter()
            .map(|id| {
                let (s, c) = &sums[&id];
                if c.contains(&0) {
                    return Err(Error::InvalidInput(format!("layer {id} has gaps in its curve")));
                }
                Ok(LayerCurve {
                    region_mean: s.iter().zip(c).map(|(s, &c)| s / c as f64).collect(),
                    tokens: tokens.remove(&id).unwrap_or_default(),
                    layer: id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scenario,
            timesteps,
            layers,
        })
    }

    /// Mean of the per-layer region curves.
    pub fn overall_mean(&self) -> Vec<f64> {
        let n = self.timesteps.len();
        (0..n)
            .map(|k| self.layers.iter().map(|l| l.region_mean[k]).sum::<f64>() / self.layers.len() as f64)
            .collect()
    }

    /// Largest step-to-step increase of `curve` over its first `⌈n/2⌉` points.
    pub fn first_half_rise(curve: &[f64]) -> f64 {
        let half = curve.len().div_ceil(2);
        curve[..half]
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Largest `|1 − p|` over every region-mean point.
    pub fn max_deviation_from_one(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.region_mean.iter())
            .map(|p| (1.0 - p).abs())
            .fold(0.0, f64::max)
    }

    /// Smallest max-abs difference between any two layers' region curves.
    pub fn min_layer_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.layers.iter().enumerate() {
            for b in &self.layers[i + 1..] {
                let d = a
                    .region_mean
                    .iter()
                    .zip(&b.region_mean)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                best = best.min(d);
            }
        }
        best
    }

    pub fn layers_distinct(&self) -> bool {
        self.layers.len() < 2 || self.min_layer_separation() > DISTINCT_CURVE_EPS
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Smallest multiple of every grid side that is at least `min_side`.
fn experiment_side(spec: &ToySpec, min_side: usize) -> usize {
    let l = spec
        .layer_grids
        .iter()
        .flat_map(|&(r, c)| [r, c])
        .fold(1, |acc, s| acc / gcd(acc, s) * s);
    min_side.div_ceil(l) * l
}

/// A square scene with a disc-shaped object on a smooth background, and the
/// disc as the removal mask.
pub fn experiment_scene(side: usize) -> (Image, PixelMask) {
    let c = (side as f64 - 1.0) / 2.0;
    let r = side as f64 * 0.3;
    let inside = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        dx * dx + dy * dy <= r * r
    };
    let image = Image::from_fn(side, side, |x, y| {
        if inside(x, y) {
            [220, 40 + (x * 3 % 30) as u8, 30]
        } else {
            let g = (60 + 120 * (x + y) / (2 * side)) as u8;
            [g / 2, g, 200 - g / 2]
        }
    });
    (image, PixelMask::from_fn(side, side, inside))
}

fn clean_latent(image: &Image) -> Tensor {
    Tensor::from_fn(Image::CHANNELS, image.height(), image.width(), |c, y, x| {
        image.rgb(x, y)[c] as f64 / 255.0
    })
}

/// Runs a token-wise removal of [`experiment_scene`] on the toy backend.
pub fn presence_curve_experiment(
    spec: &ToySpec,
    scenario: CurveScenario,
    steps: usize,
) -> Result<CurveTable> {
    let side = experiment_side(spec, 32);
    let (image, mask) = experiment_scene(side);
    let x0 = clean_latent(&image);
    let target = match scenario {
        CurveScenario::Control => TargetField::Explicit(x0),
        CurveScenario::Orthogonal => TargetField::orthogonal_to(&x0, spec.seed),
    };
    let mut backend = ToyBackend::new(spec.clone().with_target(target))?;
    let config = RemovalConfig {
        steps,
        seed: spec.seed,
        strategy: StrategyKind::TokenWise,
        ..RemovalConfig::default()
    };
    let out = run_removal(&mut backend, &image, &mask, &config, "curves")?;
    CurveTable::from_records(scenario, &out.curves)
}
