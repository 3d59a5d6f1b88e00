//! Suppression policies: the adaptive token-wise rule and its ablation
//! variants, each producing one [`SuppressionVector`] per (timestep, layer).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    presence_scores, suppression_vector, AttentionMap, DescriptorAxis, LayerId, PresenceField,
    SuppressionVector,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    /// `η(i) = 1 − p(i)` per masked token.
    #[default]
    #[serde(rename = "token", alias = "token_wise")]
    TokenWise,
    /// One shared `η = 1 − mean(p)` over the masked region.
    #[serde(rename = "region", alias = "region_based")]
    RegionBased,
    /// Presence replaced by the schedule position `t / T`.
    #[serde(rename = "timestep", alias = "timestep_based")]
    TimestepBased,
    /// `η = 0` on the mask.
    #[serde(rename = "full")]
    Full,
    /// No suppression.
    #[serde(rename = "none")]
    None,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::TokenWise,
        StrategyKind::RegionBased,
        StrategyKind::TimestepBased,
        StrategyKind::Full,
        StrategyKind::None,
    ];

    /// Short name used by the CLI and config files.
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::TokenWise => "token",
            StrategyKind::RegionBased => "region",
            StrategyKind::TimestepBased => "timestep",
            StrategyKind::Full => "full",
            StrategyKind::None => "none",
        }
    }

    /// Whether the policy compares source and target attention maps.
    pub fn needs_maps(self) -> bool {
        matches!(self, StrategyKind::TokenWise | StrategyKind::RegionBased)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" | "token_wise" => Ok(StrategyKind::TokenWise),
            "region" | "region_based" => Ok(StrategyKind::RegionBased),
            "timestep" | "timestep_based" => Ok(StrategyKind::TimestepBased),
            "full" => Ok(StrategyKind::Full),
            "none" => Ok(StrategyKind::None),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected token|region|timestep|full|none)"
            ))),
        }
    }
}

/// Inputs available to a policy at one hooked layer.
#[derive(Debug, Clone, Copy)]
pub struct StrategyContext<'a> {
    pub timestep: usize,
    pub total_steps: usize,
    pub layer: &'a LayerId,
    pub masked_indices: &'a [usize],
    pub num_keys: usize,
    pub axis: DescriptorAxis,
    pub src_map: Option<&'a AttentionMap>,
    pub tgt_map: Option<&'a AttentionMap>,
}

/// A policy decision together with the presence scores it was derived from.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub eta: SuppressionVector,
    /// Token-wise scores, present only for map-comparing policies.
    pub presence: Option<PresenceField>,
}

pub fn compute_eta(kind: StrategyKind, ctx: &StrategyContext<'_>) -> Result<SuppressionVector> {
    evaluate(kind, ctx).map(|o| o.eta)
}

pub fn evaluate(kind: StrategyKind, ctx: &StrategyContext<'_>) -> Result<StrategyOutcome> {
    if ctx.total_steps == 0 || ctx.timestep == 0 || ctx.timestep > ctx.total_steps {
        return Err(Error::Config(format!(
            "timestep {} outside 1..={}",
            ctx.timestep, ctx.total_steps
        )));
    }
    match kind {
        StrategyKind::None => Ok(StrategyOutcome {
            eta: SuppressionVector::ones(ctx.num_keys),
            presence: None,
        }),
        StrategyKind::Full => Ok(StrategyOutcome {
            eta: SuppressionVector::masked_constant(ctx.masked_indices, ctx.num_keys, 0.0)?,
            presence: None,
        }),
        StrategyKind::TimestepBased => {
            let p = ctx.timestep as f64 / ctx.total_steps as f64;
            Ok(StrategyOutcome {
                eta: SuppressionVector::masked_constant(ctx.masked_indices, ctx.num_keys, 1.0 - p)?,
                presence: None,
            })
        }
        StrategyKind::TokenWise | StrategyKind::RegionBased => {
            let (Some(src), Some(tgt)) = (ctx.src_map, ctx.tgt_map) else {
                return Err(Error::Config(format!(
                    "strategy `{kind}` needs source and target attention maps"
                )));
            };
            let field = presence_scores(src, tgt, ctx.masked_indices, ctx.axis)?;
            let eta = if kind == StrategyKind::TokenWise {
                suppression_vector(&field, ctx.masked_indices, ctx.num_keys)?
            } else {
                let mean = field.mean().unwrap_or(0.0);
                SuppressionVector::masked_constant(ctx.masked_indices, ctx.num_keys, 1.0 - mean)?
            };
            Ok(StrategyOutcome {
                eta,
                presence: Some(field),
            })
        }
    }
}
