//! Training-free object removal by presence-adaptive self-attention suppression.
//!
//! A source image is encoded to a latent, forward-diffused with one shared
//! noise draw, and denoised on two concatenated branches. At every hooked
//! self-attention layer the source (reference) and target attention maps are
//! compared token by token; the resulting presence scores set how strongly
//! the target branch is kept from attending to the masked object. The
//! background is re-imposed from the source branch after every step.
//!
//! Module map:
//!
//! * [`attention`]: softmax, descriptors, presence scores, suppression.
//! * [`strategy`]: token-wise policy and its ablation variants.
//! * [`orchestrator`]: noising, masks, blending and the denoising loop.
//! * [`backend`]: the model boundary plus a deterministic toy backend.
//! * [`theory`]: executable checks of the mixture, noise and KL analyses.

pub mod attention;
pub mod backend;
pub mod error;
pub mod orchestrator;
pub mod strategy;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
