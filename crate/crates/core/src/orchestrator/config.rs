//! Run configuration, serializable as the JSON accepted by the CLI
//! (`--config`) and the job service.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::latent::ReferenceScheme;
use crate::attention::DescriptorAxis;
use crate::backend::{BackendDescriptor, LayerInfo, TOY_BACKEND_ID};
use crate::error::{Error, Result};
use crate::strategy::StrategyKind;

/// Per-layer cap on token-level curve records; larger masks log the region mean.
pub const DEFAULT_CURVE_TOKEN_CAP: usize = 4096;

/// Which cataloged self-attention layers are suppressed and logged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSelection {
    #[default]
    All,
    /// Layers whose longest token-grid side equals `n`.
    Resolution(usize),
}

impl LayerSelection {
    pub fn selects(&self, layer: &LayerInfo) -> bool {
        match self {
            LayerSelection::All => true,
            LayerSelection::Resolution(n) => layer.resolution() == *n,
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Resolution(n) => write!(f, "res:{n}"),
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        s.strip_prefix("res:")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n > 0)
            .map(LayerSelection::Resolution)
            .ok_or_else(|| Error::Config(format!("invalid layer selection `{s}` (expected all|res:<n>)")))
    }
}

impl TryFrom<String> for LayerSelection {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSelection> for String {
    fn from(s: LayerSelection) -> String {
        s.to_string()
    }
}

/// Latent the target is blended against outside the mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendSource {
    /// The source forward-diffused to `t − 1` with the run's shared noise.
    #[default]
    Forward,
    /// The source branch's own denoised output at `t − 1`.
    Denoised,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Text condition; empty means unconditional.
    pub prompt: String,
    /// Classifier-free guidance scale; `None` runs a single pass.
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemovalConfig {
    pub steps: usize,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub reference: ReferenceScheme,
    pub axis: DescriptorAxis,
    pub layers: LayerSelection,
    /// Mask dilation radius in pixels.
    pub dilate: usize,
    pub guidance: GuidanceConfig,
    pub blend_source: BlendSource,
    pub backend: String,
    pub curve_token_cap: usize,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            strategy: StrategyKind::TokenWise,
            reference: ReferenceScheme::Matched,
            axis: DescriptorAxis::KeyColumn,
            layers: LayerSelection::All,
            dilate: 0,
            guidance: GuidanceConfig::default(),
            blend_source: BlendSource::Forward,
            backend: TOY_BACKEND_ID.to_string(),
            curve_token_cap: DEFAULT_CURVE_TOKEN_CAP,
        }
    }
}

impl RemovalConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(format!("config JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// Checks the config against what a backend can do.
    pub fn validate(&self, backend: &BackendDescriptor) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        let caps = backend.capabilities;
        if !self.guidance.prompt.is_empty() && !caps.text_prompt {
            return Err(Error::Config(format!(
                "backend `{}` is unconditional; prompts are not supported",
                backend.backend_id
            )));
        }
        if self.guidance.prompt.is_empty() && !caps.empty_prompt {
            return Err(Error::Config(format!(
                "backend `{}` requires a prompt",
                backend.backend_id
            )));
        }
        if let Some(scale) = self.guidance.scale {
            if !caps.classifier_free_guidance {
                return Err(Error::Config(format!(
                    "backend `{}` does not support classifier-free guidance",
                    backend.backend_id
                )));
            }
            if !scale.is_finite() || scale < 0.0 {
                return Err(Error::Config(format!("invalid guidance scale {scale}")));
            }
        }
        if !backend.layers.iter().any(|l| self.layers.selects(l)) {
            return Err(Error::Config(format!(
                "layer selection `{}` matches no layer of backend `{}`",
                self.layers, backend.backend_id
            )));
        }
        Ok(())
    }
}
