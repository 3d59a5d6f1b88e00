//! Deterministic miniature denoiser with genuine QKV self-attention.
//!
//! The VAE is the identity up to scaling bytes into `[0, 1]`. Each layer
//! average-pools the step input onto its token grid, appends a fixed
//! sinusoidal position code, and runs multi-head self-attention with
//! projection weights drawn from the spec seed. Layers run side by side on
//! the same input and their outputs are summed onto it, so suppression in
//! one layer never alters what another layer sees within a step. The clean estimate is the fixed target field plus the
//! accumulated attention updates, and the step to `t − 1` is a deterministic
//! DDIM update toward that estimate. A branch whose target field equals its
//! clean source therefore tracks the forward-diffused source closely, while a
//! differing field pulls the masked region away from it as `ᾱ_t` grows.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    check_hook_output, AttentionHook, Backend, BackendDescriptor, BranchPair, Capabilities,
    LayerInfo, ScheduleSpec, TOY_BACKEND_ID,
};
use crate::attention::{AttentionLogits, AttentionMap, LayerId};
use crate::error::{Error, Result};
use crate::orchestrator::NoiseSchedule;
use crate::tensor::{Image, Tensor};

const CHANNELS: usize = Image::CHANNELS;
const POSITION_FEATURES: usize = 4;
const FEATURES: usize = CHANNELS + POSITION_FEATURES;

/// The clean image the toy denoiser pulls toward.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetField {
    /// Low-frequency sinusoidal pattern in `[0, 1]`, generated per latent shape.
    Smooth { seed: u64 },
    Constant(f64),
    Explicit(Tensor),
}

impl TargetField {
    /// A field with the mean and centred norm of `x0` whose centred part is
    /// orthogonal to the centred `x0`.
    pub fn orthogonal_to(x0: &Tensor, seed: u64) -> TargetField {
        let (c, h, w) = x0.shape();
        let r = smooth_field(c, h, w, seed);
        let (mx, mr) = (x0.mean(), r.mean());
        let xc: Vec<f64> = x0.as_slice().iter().map(|v| v - mx).collect();
        let mut rc: Vec<f64> = r.as_slice().iter().map(|v| v - mr).collect();
        let xx: f64 = xc.iter().map(|v| v * v).sum();
        if xx > 0.0 {
            let coef = rc.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>() / xx;
            for (a, b) in rc.iter_mut().zip(&xc) {
                *a -= coef * b;
            }
        }
        let rr: f64 = rc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if rr > 0.0 && xx > 0.0 { xx.sqrt() / rr } else { 1.0 };
        let data = rc.iter().map(|v| mx + scale * v).collect();
        TargetField::Explicit(Tensor::from_vec(c, h, w, data).expect("shape preserved"))
    }

    fn materialize(&self, shape: (usize, usize, usize)) -> Result<Tensor> {
        let (c, h, w) = shape;
        match self {
            TargetField::Smooth { seed } => Ok(smooth_field(c, h, w, *seed)),
            TargetField::Constant(v) => Ok(Tensor::filled(c, h, w, *v)),
            TargetField::Explicit(t) => {
                if t.shape() != shape {
                    return Err(Error::shape(format!("{shape:?}"), format!("{:?}", t.shape())));
                }
                Ok(t.clone())
            }
        }
    }
}

fn smooth_field(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
    let mut waves = Vec::with_capacity(c * 3);
    for _ in 0..c * 3 {
        let amp: f64 = rng.random_range(0.08..0.15);
        let fx: f64 = rng.random_range(0.5..2.0);
        let fy: f64 = rng.random_range(0.5..2.0);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        waves.push((amp, fx, fy, phase));
    }
    Tensor::from_fn(c, h, w, |ch, y, x| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        0.5 + waves[ch * 3..ch * 3 + 3]
            .iter()
            .map(|(a, fx, fy, p)| a * (2.0 * PI * (fx * u + fy * v) + p).sin())
            .sum::<f64>()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    /// Token grid `(rows, cols)` of each layer, in evaluation order.
    pub layer_grids: Vec<(usize, usize)>,
    pub heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    /// Scale of the query/key projections; larger means peakier attention.
    pub sharpness: f64,
    /// Weight of each layer's attention output in the residual stream.
    pub attention_gain: f64,
    pub target: TargetField,
}

impl ToySpec {
    pub fn new(layers: usize, grid: (usize, usize), seed: u64) -> Self {
        Self {
            layer_grids: vec![grid; layers],
            seed,
            ..Self::default()
        }
    }

    pub fn with_target(mut self, target: TargetField) -> Self {
        self.target = target;
        self
    }
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            layer_grids: vec![(8, 8), (8, 8), (4, 4)],
            heads: 2,
            head_dim: 8,
            seed: 0,
            sharpness: 6.0,
            attention_gain: 0.05,
            target: TargetField::Smooth { seed: 0 },
        }
    }
}

#[derive(Debug, Clone)]
struct ToyLayer {
    info: LayerInfo,
    head_dim: usize,
    /// `heads × head_dim × FEATURES`
    wq: Vec<f64>,
    wk: Vec<f64>,
    /// `heads × CHANNELS × FEATURES`
    wv: Vec<f64>,
}

impl ToyLayer {
    fn random(info: LayerInfo, head_dim: usize, sharpness: f64, rng: &mut ChaCha8Rng) -> Self {
        let qk_scale = sharpness / (FEATURES as f64).sqrt();
        let v_scale = 1.0 / (FEATURES as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let heads = info.heads;
        let wq = draw(heads * head_dim * FEATURES, qk_scale);
        let wk = draw(heads * head_dim * FEATURES, qk_scale);
        let wv = draw(heads * CHANNELS * FEATURES, v_scale);
        Self {
            info,
            head_dim,
            wq,
            wk,
            wv,
        }
    }

    /// Pooled channels plus position code per token, `tokens × FEATURES`.
    fn features(&self, stream: &Tensor) -> Vec<f64> {
        let (rows, cols) = self.info.grid;
        let (_, h, w) = stream.shape();
        let (ch, cw) = (h / rows, w / cols);
        let area = (ch * cw) as f64;
        let mut out = Vec::with_capacity(rows * cols * FEATURES);
        for r in 0..rows {
            for c in 0..cols {
                for channel in 0..CHANNELS {
                    let mut acc = 0.0;
                    for y in r * ch..(r + 1) * ch {
                        for x in c * cw..(c + 1) * cw {
                            acc += stream.get(channel, y, x);
                        }
                    }
                    out.push(acc / area);
                }
                let (py, px) = ((r as f64 + 0.5) / rows as f64, (c as f64 + 0.5) / cols as f64);
                out.extend_from_slice(&[
                    (2.0 * PI * py).sin(),
                    (2.0 * PI * py).cos(),
                    (2.0 * PI * px).sin(),
                    (2.0 * PI * px).cos(),
                ]);
            }
        }
        out
    }

    fn project(weights: &[f64], out_dim: usize, feats: &[f64], head: usize) -> Vec<f64> {
        let block = &weights[head * out_dim * FEATURES..(head + 1) * out_dim * FEATURES];
        feats
            .chunks_exact(FEATURES)
            .flat_map(|f| {
                block
                    .chunks_exact(FEATURES)
                    .map(move |row| row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect()
    }

    fn logits(&self, feats: &[f64], timestep: usize) -> Result<AttentionLogits> {
        let n = self.info.tokens();
        let dh = self.head_dim;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut values = Vec::with_capacity(self.info.heads * n * n);
        for head in 0..self.info.heads {
            let q = Self::project(&self.wq, dh, feats, head);
            let k = Self::project(&self.wk, dh, feats, head);
            for qi in q.chunks_exact(dh) {
                for kj in k.chunks_exact(dh) {
                    values.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
            }
        }
        AttentionLogits::new(values, self.info.heads, n, n, self.info.id.clone(), timestep)
    }

    /// Head-averaged `A · V`, `tokens × CHANNELS`.
    fn aggregate(&self, map: &AttentionMap, feats: &[f64]) -> Vec<f64> {
        let n = self.info.tokens();
        let heads = self.info.heads;
        let mut out = vec![0.0; n * CHANNELS];
        for head in 0..heads {
            let v = Self::project(&self.wv, CHANNELS, feats, head);
            for i in 0..n {
                let row = map.row(head, i);
                let o = &mut out[i * CHANNELS..(i + 1) * CHANNELS];
                for (j, &a) in row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (oc, vc) in o.iter_mut().zip(&v[j * CHANNELS..(j + 1) * CHANNELS]) {
                        *oc += a * vc;
                    }
                }
            }
        }
        let inv = 1.0 / heads as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    fn add_upsampled(&self, stream: &mut Tensor, update: &[f64], gain: f64) {
        let (rows, cols) = self.info.grid;
        let (_, h, w) = stream.shape();
        let (ch, cw) = (h / rows, w / cols);
        for channel in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let token = (y / ch) * cols + x / cw;
                    let v = stream.get(channel, y, x) + gain * update[token * CHANNELS + channel];
                    stream.set(channel, y, x, v);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    spec: ToySpec,
    descriptor: BackendDescriptor,
    layers: Vec<ToyLayer>,
    field_cache: Option<Tensor>,
}

impl ToyBackend {
    pub fn new(spec: ToySpec) -> Result<Self> {
        if spec.layer_grids.is_empty() {
            return Err(Error::Config("toy backend needs at least one layer".into()));
        }
        if let Some(g) = spec.layer_grids.iter().find(|g| g.0 < 2 || g.1 < 2) {
            return Err(Error::Config(format!("toy token grid {g:?} is smaller than 2x2")));
        }
        if spec.heads == 0 || spec.head_dim == 0 {
            return Err(Error::Config("toy backend needs positive heads and head_dim".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers: Vec<ToyLayer> = spec
            .layer_grids
            .iter()
            .enumerate()
            .map(|(i, &grid)| {
                let info = LayerInfo {
                    id: LayerId::new(format!("attn{i}")),
                    grid,
                    heads: spec.heads,
                };
                ToyLayer::random(info, spec.head_dim, spec.sharpness, &mut rng)
            })
            .collect();
        let descriptor = BackendDescriptor {
            backend_id: TOY_BACKEND_ID.to_string(),
            latent_channels: CHANNELS,
            spatial_factor: 1,
            layers: layers.iter().map(|l| l.info.clone()).collect(),
            schedule: ScheduleSpec::SCALED_LINEAR,
            capabilities: Capabilities {
                empty_prompt: true,
                text_prompt: false,
                classifier_free_guidance: false,
                batch_concat: true,
            },
        };
        Ok(Self {
            spec,
            descriptor,
            layers,
            field_cache: None,
        })
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    /// Query/key/value projection weights of each layer, for determinism checks.
    pub fn weights(&self) -> Vec<(&[f64], &[f64], &[f64])> {
        self.layers
            .iter()
            .map(|l| (l.wq.as_slice(), l.wk.as_slice(), l.wv.as_slice()))
            .collect()
    }

    fn check_geometry(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("empty image".into()));
        }
        for l in &self.layers {
            let (rows, cols) = l.info.grid;
            if height % rows != 0 || width % cols != 0 {
                return Err(Error::InvalidInput(format!(
                    "{width}x{height} is not divisible by layer {} grid {rows}x{cols}",
                    l.info.id
                )));
            }
        }
        Ok(())
    }

    fn target_field(&mut self, shape: (usize, usize, usize)) -> Result<Tensor> {
        if let Some(f) = &self.field_cache {
            if f.shape() == shape {
                return Ok(f.clone());
            }
        }
        let f = self.spec.target.materialize(shape)?;
        self.field_cache = Some(f.clone());
        Ok(f)
    }
}

impl Backend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode(&self, image: &Image) -> Result<Tensor> {
        let (w, h) = (image.width(), image.height());
        self.check_geometry(h, w)?;
        Ok(Tensor::from_fn(CHANNELS, h, w, |c, y, x| {
            image.rgb(x, y)[c] as f64 / 255.0
        }))
    }

    fn decode(&self, latent: &Tensor) -> Result<Image> {
        let (c, h, w) = latent.shape();
        if c != CHANNELS {
            return Err(Error::shape(format!("{CHANNELS} latent channels"), c));
        }
        self.check_geometry(h, w)?;
        Ok(Image::from_fn(w, h, |x, y| {
            let px = |ch| (latent.get(ch, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            [px(0), px(1), px(2)]
        }))
    }

    fn denoise(
        &mut self,
        batch: &BranchPair<Tensor>,
        timestep: usize,
        schedule: &NoiseSchedule,
        hook: &mut dyn AttentionHook,
    ) -> Result<BranchPair<Tensor>> {
        batch.source.ensure_same_shape(&batch.target)?;
        let shape = batch.target.shape();
        if shape.0 != CHANNELS {
            return Err(Error::shape(format!("{CHANNELS} latent channels"), shape.0));
        }
        self.check_geometry(shape.1, shape.2)?;
        if timestep == 0 || timestep > schedule.steps() {
            return Err(Error::InvalidInput(format!(
                "timestep {timestep} outside 1..={}",
                schedule.steps()
            )));
        }
        let a_t = schedule.alpha_bar(timestep)?;
        let a_prev = schedule.alpha_bar(timestep - 1)?;
        let field = self.target_field(shape)?;
        let gain = self.spec.attention_gain;

        // Every layer reads the step input; outputs accumulate on top of it.
        let mut streams = BranchPair::new(batch.source.clone(), batch.target.clone());
        for layer in &self.layers {
            let feats = BranchPair::new(layer.features(&batch.source), layer.features(&batch.target));
            let wrap = |e: Error| Error::Backend {
                layer: layer.info.id.to_string(),
                timestep,
                source: Box::new(e),
            };
            let logits = BranchPair::new(
                layer.logits(&feats.source, timestep).map_err(wrap)?,
                layer.logits(&feats.target, timestep).map_err(wrap)?,
            );
            let maps = hook
                .attend(&layer.info, timestep, &logits)
                .and_then(|m| check_hook_output(&logits, &m).map(|_| m))
                .map_err(wrap)?;
            let out_src = layer.aggregate(&maps.source, &feats.source);
            let out_tgt = layer.aggregate(&maps.target, &feats.target);
            layer.add_upsampled(&mut streams.source, &out_src, gain);
            layer.add_upsampled(&mut streams.target, &out_tgt, gain);
        }

        let step = |x_t: &Tensor, stream: &Tensor| -> Result<Tensor> {
            let (s_t, n_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
            let (s_p, n_p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
            let data = x_t
                .as_slice()
                .iter()
                .zip(stream.as_slice())
                .zip(field.as_slice())
                .map(|((&x, &s), &f)| {
                    let x0_hat = f + (s - x);
                    if n_t < 1e-12 {
                        return x0_hat;
                    }
                    let eps_hat = (x - s_t * x0_hat) / n_t;
                    s_p * x0_hat + n_p * eps_hat
                })
                .collect();
            Tensor::from_vec(shape.0, shape.1, shape.2, data)
        };
        Ok(BranchPair::new(
            step(&batch.source, &streams.source)?,
            step(&batch.target, &streams.target)?,
        ))
    }
}
