//! The attention hook installed for a removal run.

use super::curves::{CurveRecord, TokenRef};
use super::{AttentionEvent, RemovalObserver, StepContext};
use crate::attention::{
    ensure_self_attention, modulated_softmax, row_softmax, AttentionLogits, AttentionMap, Branch,
    PresenceField,
};
use crate::backend::{AttentionHook, BranchPair, LayerInfo};
use crate::error::Result;
use crate::strategy::{evaluate, StrategyContext};

pub(crate) struct SuppressionHook<'a, 'c> {
    pub ctx: &'a StepContext<'c>,
    pub observer: &'a mut dyn RemovalObserver,
    pub records: Vec<CurveRecord>,
}

impl<'a, 'c> SuppressionHook<'a, 'c> {
    pub fn new(ctx: &'a StepContext<'c>, observer: &'a mut dyn RemovalObserver) -> Self {
        Self {
            ctx,
            observer,
            records: Vec::new(),
        }
    }

    fn record(&mut self, field: &PresenceField, masked: &[usize]) {
        let job_id = self.ctx.job_id;
        let mut push = |token_index, presence| {
            self.records.push(CurveRecord {
                job_id: job_id.to_string(),
                timestep: field.timestep,
                layer_id: field.layer.clone(),
                token_index,
                presence,
            })
        };
        if masked.len() <= self.ctx.config.curve_token_cap {
            for (&i, &p) in field.scores() {
                push(TokenRef::Token(i), p);
            }
        } else if let Some(mean) = field.mean() {
            push(TokenRef::Region, mean);
        }
    }

    fn suppress(
        &mut self,
        layer: &LayerInfo,
        timestep: usize,
        logits: &AttentionLogits,
        src: &AttentionMap,
        raw: &AttentionMap,
        masked: &[usize],
    ) -> Result<AttentionMap> {
        ensure_self_attention(logits)?;
        let config = self.ctx.config;
        let outcome = evaluate(
            config.strategy,
            &StrategyContext {
                timestep,
                total_steps: self.ctx.schedule.steps(),
                layer: &layer.id,
                masked_indices: masked,
                num_keys: logits.num_keys(),
                axis: config.axis,
                src_map: Some(src),
                tgt_map: Some(raw),
            },
        )?;
        if let Some(field) = &outcome.presence {
            self.record(field, masked);
        }
        // η ≡ 1 hands back the raw map untouched; η ≡ 0 has no mass to
        // renormalize, so the layer keeps its own softmax.
        let used = if outcome.eta.is_identity() || !outcome.eta.has_positive() {
            raw.clone()
        } else {
            modulated_softmax(logits, &outcome.eta, Branch::Target)?
        };
        self.observer.on_attention(&AttentionEvent {
            layer,
            timestep,
            selected: true,
            source: src,
            target_raw: raw,
            target_used: &used,
            eta: Some(&outcome.eta),
            presence: outcome.presence.as_ref(),
        });
        Ok(used)
    }
}

impl AttentionHook for SuppressionHook<'_, '_> {
    fn attend(
        &mut self,
        layer: &LayerInfo,
        timestep: usize,
        logits: &BranchPair<AttentionLogits>,
    ) -> Result<BranchPair<AttentionMap>> {
        let src = row_softmax(&logits.source, Branch::Source);
        let raw = row_softmax(&logits.target, Branch::Target);
        let masked = self.ctx.masks.indices_at(layer.grid).unwrap_or(&[]);
        if !self.ctx.config.layers.selects(layer) || masked.is_empty() {
            self.observer.on_attention(&AttentionEvent {
                layer,
                timestep,
                selected: false,
                source: &src,
                target_raw: &raw,
                target_used: &raw,
                eta: None,
                presence: None,
            });
            return Ok(BranchPair::new(src, raw));
        }
        let used = self.suppress(layer, timestep, &logits.target, &src, &raw, masked)?;
        Ok(BranchPair::new(src, used))
    }
}
