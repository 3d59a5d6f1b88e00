//! The boundary to a pretrained latent diffusion model.
//!
//! A [`Backend`] encodes and decodes images, advertises its self-attention
//! layers and noise schedule, and denoises a concatenated source/target batch
//! while routing every self-attention softmax through an [`AttentionHook`].
//! The built-in [`toy`] backend implements the contract with genuine QKV
//! attention at desk scale; adapters for real networks plug in behind the
//! same trait.

pub mod toy;

use serde::{Deserialize, Serialize};

use crate::attention::{row_softmax, AttentionLogits, AttentionMap, Branch, LayerId};
use crate::error::{Error, Result};
use crate::orchestrator::NoiseSchedule;
use crate::tensor::{Image, Tensor};

pub use toy::{TargetField, ToyBackend, ToySpec};

/// Identifier of the built-in toy backend.
pub const TOY_BACKEND_ID: &str = "toy";

/// One self-attention layer as advertised by a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    /// Token grid as `(rows, cols)`.
    pub grid: (usize, usize),
    pub heads: usize,
}

impl LayerInfo {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Longest side of the token grid; what `res:<n>` filters on.
    pub fn resolution(&self) -> usize {
        self.grid.0.max(self.grid.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub empty_prompt: bool,
    pub text_prompt: bool,
    pub classifier_free_guidance: bool,
    pub batch_concat: bool,
}

/// Training noise schedule of a backend, subsampled per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    /// Stable Diffusion's scaled-linear betas.
    pub const SCALED_LINEAR: ScheduleSpec = ScheduleSpec {
        train_steps: 1000,
        beta_start: 0.00085,
        beta_end: 0.012,
    };

    pub fn for_steps(&self, steps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.train_steps, self.beta_start, self.beta_end, steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub latent_channels: usize,
    /// Pixels per latent cell along each axis.
    pub spatial_factor: usize,
    pub layers: Vec<LayerInfo>,
    pub schedule: ScheduleSpec,
    pub capabilities: Capabilities,
}

impl BackendDescriptor {
    pub fn layer(&self, id: &LayerId) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| &l.id == id)
    }

    pub fn latent_grid(&self, image_width: usize, image_height: usize) -> Result<(usize, usize)> {
        let f = self.spatial_factor;
        if image_width % f != 0 || image_height % f != 0 {
            return Err(Error::InvalidInput(format!(
                "image {image_width}x{image_height} is not divisible by spatial factor {f}"
            )));
        }
        Ok((image_height / f, image_width / f))
    }
}

/// A value per branch of the concatenated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPair<T> {
    pub source: T,
    pub target: T,
}

impl<T> BranchPair<T> {
    pub fn new(source: T, target: T) -> Self {
        Self { source, target }
    }

    pub fn get(&self, branch: Branch) -> &T {
        match branch {
            Branch::Source => &self.source,
            Branch::Target => &self.target,
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(Branch, T) -> U) -> BranchPair<U> {
        BranchPair {
            source: f(Branch::Source, self.source),
            target: f(Branch::Target, self.target),
        }
    }
}

/// Called once per cataloged self-attention layer per denoising call.
///
/// The returned maps replace the layer's own softmax. They must have the
/// logits' shape and be row-stochastic; the logits are never mutated.
pub trait AttentionHook {
    fn attend(
        &mut self,
        layer: &LayerInfo,
        timestep: usize,
        logits: &BranchPair<AttentionLogits>,
    ) -> Result<BranchPair<AttentionMap>>;
}

/// Plain softmax on both branches; installing it changes nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct SoftmaxHook;

impl AttentionHook for SoftmaxHook {
    fn attend(
        &mut self,
        _layer: &LayerInfo,
        _timestep: usize,
        logits: &BranchPair<AttentionLogits>,
    ) -> Result<BranchPair<AttentionMap>> {
        Ok(BranchPair::new(
            row_softmax(&logits.source, Branch::Source),
            row_softmax(&logits.target, Branch::Target),
        ))
    }
}

pub trait Backend: Send {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Image to clean latent `x_0`.
    fn encode(&self, image: &Image) -> Result<Tensor>;

    /// Latent to image.
    fn decode(&self, latent: &Tensor) -> Result<Image>;

    /// One network evaluation on the concatenated batch at timestep `t`,
    /// returning both branches at `t − 1`.
    fn denoise(
        &mut self,
        batch: &BranchPair<Tensor>,
        timestep: usize,
        schedule: &NoiseSchedule,
        hook: &mut dyn AttentionHook,
    ) -> Result<BranchPair<Tensor>>;

    /// Denoising with the network's own softmax.
    fn denoise_unhooked(
        &mut self,
        batch: &BranchPair<Tensor>,
        timestep: usize,
        schedule: &NoiseSchedule,
    ) -> Result<BranchPair<Tensor>> {
        self.denoise(batch, timestep, schedule, &mut SoftmaxHook)
    }
}

/// Validates hook output against the logits it was given.
pub(crate) fn check_hook_output(
    logits: &BranchPair<AttentionLogits>,
    maps: &BranchPair<AttentionMap>,
) -> Result<()> {
    for branch in [Branch::Source, Branch::Target] {
        let l = logits.get(branch);
        let m = maps.get(branch);
        if (m.heads(), m.num_queries(), m.num_keys()) != (l.heads(), l.num_queries(), l.num_keys()) {
            return Err(Error::shape(
                format!("{}x{}x{}", l.heads(), l.num_queries(), l.num_keys()),
                format!("{}x{}x{}", m.heads(), m.num_queries(), m.num_keys()),
            ));
        }
        m.validate()?;
    }
    Ok(())
}

/// Opens a backend by id. Only the toy backend ships in-tree.
pub fn open(backend_id: &str) -> Result<Box<dyn Backend>> {
    match backend_id {
        TOY_BACKEND_ID => Ok(Box::new(ToyBackend::new(ToySpec::default())?)),
        other => Err(Error::BackendUnavailable {
            backend: other.to_string(),
            reason: "no adapter is compiled into this build (available: toy)".into(),
        }),
    }
}
