//! The removal loop: shared-noise initialization, per-step reference
//! selection, hooked denoising and exact background blending.

pub mod config;
pub mod curves;
mod hook;
pub mod latent;
pub mod mask;

pub use config::{BlendSource, GuidanceConfig, LayerSelection, RemovalConfig};
pub use curves::{CurveRecord, TokenRef};
pub use latent::{
    blend, draw_noise, forward_diffuse, init_target, reference_latent, LatentState, NoiseSchedule,
    ReferenceScheme,
};
pub use mask::{rasterize_mask, MaskSet, TokenMask};

use crate::attention::{AttentionMap, Branch, PresenceField, SuppressionVector};
use crate::backend::{Backend, BranchPair, LayerInfo};
use crate::error::{Error, Result};
use crate::tensor::{Image, PixelMask, Tensor};
use hook::SuppressionHook;

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub config: &'a RemovalConfig,
    pub schedule: &'a NoiseSchedule,
    pub masks: &'a MaskSet,
    pub job_id: &'a str,
}

pub struct StartEvent<'a> {
    pub source: &'a LatentState,
    pub noise: &'a Tensor,
    pub initial_target: &'a LatentState,
    pub schedule: &'a NoiseSchedule,
    pub masks: &'a MaskSet,
}

pub struct AttentionEvent<'a> {
    pub layer: &'a LayerInfo,
    pub timestep: usize,
    /// Whether suppression was considered at this layer.
    pub selected: bool,
    pub source: &'a AttentionMap,
    pub target_raw: &'a AttentionMap,
    /// The target map handed back to the network.
    pub target_used: &'a AttentionMap,
    pub eta: Option<&'a SuppressionVector>,
    pub presence: Option<&'a PresenceField>,
}

pub struct StepEvent<'a> {
    pub timestep: usize,
    pub reference: &'a LatentState,
    pub noise: &'a Tensor,
    pub denoised_target: &'a LatentState,
    pub blend_source: &'a LatentState,
    pub blended: &'a LatentState,
    pub latent_mask: &'a TokenMask,
}

/// Read-only taps into a run, used by tests and diagnostics.
pub trait RemovalObserver {
    fn on_start(&mut self, _event: &StartEvent<'_>) {}
    fn on_attention(&mut self, _event: &AttentionEvent<'_>) {}
    fn on_step(&mut self, _event: &StepEvent<'_>) {}
}

impl RemovalObserver for () {}

#[derive(Debug, Clone)]
pub struct RemovalOutput {
    pub image: Image,
    pub latent: Tensor,
    pub curves: Vec<CurveRecord>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Blended target at `t − 1`.
    pub target: LatentState,
    pub records: Vec<CurveRecord>,
}

/// Denoises the target from `t` to `t − 1` and blends the background back in.
pub fn denoise_step(
    backend: &mut dyn Backend,
    ctx: &StepContext<'_>,
    x0: &LatentState,
    eps: &Tensor,
    target: &LatentState,
    observer: &mut dyn RemovalObserver,
) -> Result<StepOutput> {
    let t = target.timestep;
    let reference = reference_latent(x0, t, ctx.config.reference, ctx.schedule, eps)?;
    let batch = BranchPair::new(reference.tensor.clone(), target.tensor.clone());
    let (out, records) = {
        let mut hook = SuppressionHook::new(ctx, &mut *observer);
        let out = backend.denoise(&batch, t, ctx.schedule, &mut hook)?;
        (out, hook.records)
    };
    let denoised = LatentState::new(out.target, t - 1, Branch::Target);
    let blend_source = if t == 1 {
        x0.clone()
    } else {
        match ctx.config.blend_source {
            BlendSource::Forward => forward_diffuse(x0, t - 1, eps, ctx.schedule)?,
            BlendSource::Denoised => LatentState::new(out.source, t - 1, Branch::Source),
        }
    };
    let blended = blend(&denoised, &blend_source, ctx.masks.latent())?;
    observer.on_step(&StepEvent {
        timestep: t,
        reference: &reference,
        noise: eps,
        denoised_target: &denoised,
        blend_source: &blend_source,
        blended: &blended,
        latent_mask: ctx.masks.latent(),
    });
    Ok(StepOutput {
        target: blended,
        records,
    })
}

pub fn run_removal(
    backend: &mut dyn Backend,
    image: &Image,
    mask: &PixelMask,
    config: &RemovalConfig,
    job_id: &str,
) -> Result<RemovalOutput> {
    run_removal_observed(backend, image, mask, config, job_id, &mut ())
}

pub fn run_removal_observed(
    backend: &mut dyn Backend,
    image: &Image,
    mask: &PixelMask,
    config: &RemovalConfig,
    job_id: &str,
    observer: &mut dyn RemovalObserver,
) -> Result<RemovalOutput> {
    let descriptor = backend.descriptor().clone();
    if config.backend != descriptor.backend_id {
        return Err(Error::Config(format!(
            "config names backend `{}` but `{}` was opened",
            config.backend, descriptor.backend_id
        )));
    }
    config.validate(&descriptor)?;
    if (image.width(), image.height()) != (mask.width(), mask.height()) {
        return Err(Error::InvalidInput(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let latent_grid = descriptor.latent_grid(image.width(), image.height())?;
    let masks = MaskSet::build(
        mask,
        config.dilate,
        latent_grid,
        descriptor.layers.iter().map(|l| l.grid),
    )?;
    let x0 = LatentState::clean(backend.encode(image)?);
    let (c, h, w) = x0.tensor.shape();
    if (h, w) != latent_grid {
        return Err(Error::shape(
            format!("{}x{} latent", latent_grid.0, latent_grid.1),
            format!("{h}x{w}"),
        ));
    }
    let schedule = descriptor.schedule.for_steps(config.steps)?;
    let eps = draw_noise(c, h, w, config.seed);
    let mut target = init_target(&x0, &schedule, &eps)?;
    observer.on_start(&StartEvent {
        source: &x0,
        noise: &eps,
        initial_target: &target,
        schedule: &schedule,
        masks: &masks,
    });

    let ctx = StepContext {
        config,
        schedule: &schedule,
        masks: &masks,
        job_id,
    };
    let mut curves = Vec::new();
    while target.timestep > 0 {
        let step = denoise_step(backend, &ctx, &x0, &eps, &target, observer)?;
        target = step.target;
        curves.extend(step.records);
    }
    Ok(RemovalOutput {
        image: backend.decode(&target.tensor)?,
        latent: target.tensor,
        curves,
    })
}
