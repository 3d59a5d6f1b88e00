//! Attention mathematics: softmax, token descriptors, presence scores and
//! the presence-modulated softmax applied to the target branch.
//!
//! Everything here is a pure function of its inputs. Multi-head tensors are
//! stored head-major as `heads × queries × keys`; descriptors average over
//! heads and suppression coefficients apply to every head identically.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating row-stochastic maps.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Descriptors with a norm below this compare as similarity 0.
pub const ZERO_NORM: f64 = 1e-12;
/// Modulated rows whose total mass falls below this are replaced by a uniform row.
pub const DEGENERATE_MASS: f64 = 1e-20;

/// Opaque identifier of one self-attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(String);

impl LayerId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Source,
    Target,
}

/// Which slice of an attention map describes a token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorAxis {
    /// Column `i`: the attention token `i` receives from every query.
    #[default]
    KeyColumn,
    /// Row `i`: the attention token `i` pays to every key.
    QueryRow,
}

impl std::str::FromStr for DescriptorAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key_column" | "key" | "column" => Ok(Self::KeyColumn),
            "query_row" | "query" | "row" => Ok(Self::QueryRow),
            other => Err(Error::Config(format!(
                "unknown descriptor axis `{other}` (expected key_column|query_row)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    heads: usize,
    queries: usize,
    keys: usize,
}

impl Geometry {
    fn new(heads: usize, queries: usize, keys: usize, len: usize) -> Result<Self> {
        if heads == 0 || queries == 0 || keys == 0 {
            return Err(Error::InvalidInput(format!(
                "attention geometry must be positive, got {heads}x{queries}x{keys}"
            )));
        }
        if heads * queries * keys != len {
            return Err(Error::shape(
                format!("{heads}x{queries}x{keys} = {} values", heads * queries * keys),
                format!("{len} values"),
            ));
        }
        Ok(Self {
            heads,
            queries,
            keys,
        })
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.heads, self.queries, self.keys)
    }
}

/// Pre-softmax scores `QKᵀ/√d` for one layer and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLogits {
    values: Vec<f64>,
    geometry: Geometry,
    layer: LayerId,
    timestep: usize,
}

impl AttentionLogits {
    pub fn new(
        values: Vec<f64>,
        heads: usize,
        queries: usize,
        keys: usize,
        layer: LayerId,
        timestep: usize,
    ) -> Result<Self> {
        let geometry = Geometry::new(heads, queries, keys, values.len())?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite attention logit at flat index {pos}"
            )));
        }
        Ok(Self {
            values,
            geometry,
            layer,
            timestep,
        })
    }

    /// Single-head square logits, the common case in tests.
    pub fn square(values: Vec<f64>, tokens: usize, layer: LayerId, timestep: usize) -> Result<Self> {
        Self::new(values, 1, tokens, tokens, layer, timestep)
    }

    pub fn heads(&self) -> usize {
        self.geometry.heads
    }

    pub fn num_queries(&self) -> usize {
        self.geometry.queries
    }

    pub fn num_keys(&self) -> usize {
        self.geometry.keys
    }

    pub fn layer(&self) -> &LayerId {
        &self.layer
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let k = self.geometry.keys;
        let start = (head * self.geometry.queries + query) * k;
        &self.values[start..start + k]
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.geometry.keys)
    }

    fn ensure_square(&self) -> Result<()> {
        if self.geometry.queries != self.geometry.keys {
            return Err(Error::InvalidInput(format!(
                "self-attention logits must be square, got {} queries x {} keys",
                self.geometry.queries, self.geometry.keys
            )));
        }
        Ok(())
    }
}

/// Row-stochastic attention weights for one layer, timestep and branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Vec<f64>,
    geometry: Geometry,
    branch: Branch,
    layer: LayerId,
    timestep: usize,
}

impl AttentionMap {
    /// Validating constructor for externally produced weights.
    pub fn new(
        values: Vec<f64>,
        heads: usize,
        queries: usize,
        keys: usize,
        branch: Branch,
        layer: LayerId,
        timestep: usize,
    ) -> Result<Self> {
        let geometry = Geometry::new(heads, queries, keys, values.len())?;
        let map = Self {
            values,
            geometry,
            branch,
            layer,
            timestep,
        };
        map.validate()?;
        Ok(map)
    }

    /// Checks entries lie in `[0, 1]` and rows sum to 1.
    pub fn validate(&self) -> Result<()> {
        for (r, row) in self.values.chunks_exact(self.geometry.keys).enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "attention row {r} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "attention row {r} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.geometry.heads
    }

    pub fn num_queries(&self) -> usize {
        self.geometry.queries
    }

    pub fn num_keys(&self) -> usize {
        self.geometry.keys
    }

    /// Token count of a square map.
    pub fn num_tokens(&self) -> usize {
        self.geometry.keys
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn layer(&self) -> &LayerId {
        &self.layer
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn weight(&self, head: usize, query: usize, key: usize) -> f64 {
        self.values[(head * self.geometry.queries + query) * self.geometry.keys + key]
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let k = self.geometry.keys;
        let start = (head * self.geometry.queries + query) * k;
        &self.values[start..start + k]
    }

    pub fn same_shape(&self, other: &AttentionMap) -> bool {
        self.geometry == other.geometry
    }

    /// Byte-level equality of the weights, ignoring labels.
    pub fn bitwise_eq(&self, other: &AttentionMap) -> bool {
        self.geometry == other.geometry
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn with_branch(mut self, branch: Branch) -> Self {
        self.branch = branch;
        self
    }
}

/// Attention signature of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDescriptor {
    pub values: Vec<f64>,
    pub token_index: usize,
    pub axis: DescriptorAxis,
}

impl TokenDescriptor {
    pub fn new(values: Vec<f64>, token_index: usize, axis: DescriptorAxis) -> Self {
        Self {
            values,
            token_index,
            axis,
        }
    }
}

/// Presence scores `p(i)` over the masked tokens of one layer and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceField {
    pub layer: LayerId,
    pub timestep: usize,
    scores: BTreeMap<usize, f64>,
}

impl PresenceField {
    pub fn from_scores(layer: LayerId, timestep: usize, scores: BTreeMap<usize, f64>) -> Self {
        let scores = scores
            .into_iter()
            .map(|(i, p)| (i, p.clamp(0.0, 1.0)))
            .collect();
        Self {
            layer,
            timestep,
            scores,
        }
    }

    pub fn get(&self, token: usize) -> Option<f64> {
        self.scores.get(&token).copied()
    }

    pub fn scores(&self) -> &BTreeMap<usize, f64> {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Arithmetic mean of the scores, `None` for an empty field.
    pub fn mean(&self) -> Option<f64> {
        if self.scores.is_empty() {
            None
        } else {
            Some(self.scores.values().sum::<f64>() / self.scores.len() as f64)
        }
    }
}

/// Per-key suppression coefficients `η`, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuppressionVector {
    coefficients: Vec<f64>,
}

impl SuppressionVector {
    pub fn ones(num_keys: usize) -> Self {
        Self {
            coefficients: vec![1.0; num_keys],
        }
    }

    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if let Some((j, v)) = coefficients
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidInput(format!(
                "suppression coefficient {j} = {v} outside [0, 1]"
            )));
        }
        Ok(Self { coefficients })
    }

    /// Sets `η(i) = value` on every listed key and 1 elsewhere.
    pub fn masked_constant(masked: &[usize], num_keys: usize, value: f64) -> Result<Self> {
        let mut coefficients = vec![1.0; num_keys];
        let value = value.clamp(0.0, 1.0);
        for &i in masked {
            *coefficients
                .get_mut(i)
                .ok_or(Error::IndexOutOfRange { index: i, len: num_keys })? = value;
        }
        Ok(Self { coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.coefficients.iter().all(|&v| v == 1.0)
    }

    pub fn has_positive(&self) -> bool {
        self.coefficients.iter().any(|&v| v > 0.0)
    }
}

/// Max-subtracted softmax of one row into `out`.
fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &a) in out.iter_mut().zip(row) {
        *o = (a - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `η(j)·exp(a_j) / Σ η(k)·exp(a_k)` for one row.
///
/// The max is taken over keys with `η > 0`, so with `η ≡ 1` every operation
/// matches [`softmax_row`] and the result is bitwise identical.
fn modulated_row(row: &[f64], eta: &[f64], out: &mut [f64]) {
    let max = row
        .iter()
        .zip(eta)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&a, _)| a)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for ((o, &a), &e) in out.iter_mut().zip(row).zip(eta) {
        *o = if e > 0.0 { e * (a - max).exp() } else { 0.0 };
        sum += *o;
    }
    if sum < DEGENERATE_MASS {
        let live = eta.iter().filter(|&&e| e > 0.0).count() as f64;
        for (o, &e) in out.iter_mut().zip(eta) {
            *o = if e > 0.0 { 1.0 / live } else { 0.0 };
        }
        return;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of the logits.
pub fn row_softmax(logits: &AttentionLogits, branch: Branch) -> AttentionMap {
    let k = logits.geometry.keys;
    let mut values = vec![0.0; logits.values.len()];
    for (row, out) in logits.rows().zip(values.chunks_exact_mut(k)) {
        softmax_row(row, out);
    }
    AttentionMap {
        values,
        geometry: logits.geometry,
        branch,
        layer: logits.layer.clone(),
        timestep: logits.timestep,
    }
}

/// Softmax with every key's exponential scaled by its suppression coefficient.
///
/// A row whose remaining mass underflows becomes uniform over the keys with
/// `η > 0`. At least one coefficient must be positive.
pub fn modulated_softmax(
    logits: &AttentionLogits,
    eta: &SuppressionVector,
    branch: Branch,
) -> Result<AttentionMap> {
    let k = logits.geometry.keys;
    if eta.len() != k {
        return Err(Error::shape(format!("{k} coefficients"), eta.len()));
    }
    if !eta.has_positive() {
        return Err(Error::InvalidInput(
            "every key is fully suppressed; no attention mass remains".into(),
        ));
    }
    let mut values = vec![0.0; logits.values.len()];
    for (row, out) in logits.rows().zip(values.chunks_exact_mut(k)) {
        modulated_row(row, &eta.coefficients, out);
    }
    Ok(AttentionMap {
        values,
        geometry: logits.geometry,
        branch,
        layer: logits.layer.clone(),
        timestep: logits.timestep,
    })
}

/// Same distribution as [`modulated_softmax`], computed as a softmax over
/// logits shifted by `ln η(j)`. Requires every `η(j) > 0`.
pub fn logit_shift_softmax(
    logits: &AttentionLogits,
    eta: &SuppressionVector,
    branch: Branch,
) -> Result<AttentionMap> {
    let k = logits.geometry.keys;
    if eta.len() != k {
        return Err(Error::shape(format!("{k} coefficients"), eta.len()));
    }
    if let Some(j) = eta.coefficients.iter().position(|&e| e <= 0.0) {
        return Err(Error::Domain(format!(
            "log of suppression coefficient {j} = 0 is undefined"
        )));
    }
    let bias: Vec<f64> = eta.coefficients.iter().map(|e| e.ln()).collect();
    let mut scratch = vec![0.0; k];
    let mut values = vec![0.0; logits.values.len()];
    for (row, out) in logits.rows().zip(values.chunks_exact_mut(k)) {
        for ((s, &a), &b) in scratch.iter_mut().zip(row).zip(&bias) {
            *s = a + b;
        }
        softmax_row(&scratch, out);
    }
    Ok(AttentionMap {
        values,
        geometry: logits.geometry,
        branch,
        layer: logits.layer.clone(),
        timestep: logits.timestep,
    })
}

/// Head-averaged attention column or row of `token_index`.
pub fn extract_descriptor(
    map: &AttentionMap,
    token_index: usize,
    axis: DescriptorAxis,
) -> Result<TokenDescriptor> {
    let g = map.geometry;
    let bound = match axis {
        DescriptorAxis::KeyColumn => g.keys,
        DescriptorAxis::QueryRow => g.queries,
    };
    if token_index >= bound {
        return Err(Error::IndexOutOfRange {
            index: token_index,
            len: bound,
        });
    }
    let values = match axis {
        DescriptorAxis::KeyColumn => {
            let mut acc = vec![0.0; g.queries];
            for h in 0..g.heads {
                for (q, a) in acc.iter_mut().enumerate() {
                    *a += map.weight(h, q, token_index);
                }
            }
            acc
        }
        DescriptorAxis::QueryRow => {
            let mut acc = vec![0.0; g.keys];
            for h in 0..g.heads {
                for (a, &w) in acc.iter_mut().zip(map.row(h, token_index)) {
                    *a += w;
                }
            }
            acc
        }
    };
    let values = if g.heads > 1 {
        let n = g.heads as f64;
        values.into_iter().map(|v| v / n).collect()
    } else {
        values
    };
    Ok(TokenDescriptor::new(values, token_index, axis))
}

/// Cosine similarity clamped to `[0, 1]`; 0 when either vector is (near) zero.
pub fn cosine_similarity(u: &TokenDescriptor, v: &TokenDescriptor) -> Result<f64> {
    cosine_slices(&u.values, &v.values)
}

pub(crate) fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(0.0, 1.0))
}

/// Token-wise presence `p(i) = cos(tgt(i), src(i))` over the masked tokens.
pub fn presence_scores(
    src_map: &AttentionMap,
    tgt_map: &AttentionMap,
    masked_indices: &[usize],
    axis: DescriptorAxis,
) -> Result<PresenceField> {
    if !src_map.same_shape(tgt_map) {
        return Err(Error::shape(src_map.geometry, tgt_map.geometry));
    }
    if src_map.layer != tgt_map.layer || src_map.timestep != tgt_map.timestep {
        return Err(Error::InvalidInput(format!(
            "maps come from different slots: ({}, t={}) vs ({}, t={})",
            src_map.layer, src_map.timestep, tgt_map.layer, tgt_map.timestep
        )));
    }
    if src_map.branch != Branch::Source || tgt_map.branch != Branch::Target {
        return Err(Error::InvalidInput(
            "presence compares a source map against a target map".into(),
        ));
    }
    let mut scores = BTreeMap::new();
    for &i in masked_indices {
        let tgt = extract_descriptor(tgt_map, i, axis)?;
        let src = extract_descriptor(src_map, i, axis)?;
        scores.insert(i, cosine_similarity(&tgt, &src)?);
    }
    Ok(PresenceField::from_scores(
        tgt_map.layer.clone(),
        tgt_map.timestep,
        scores,
    ))
}

/// `η(i) = 1 − p(i)` on the masked tokens, 1 elsewhere.
pub fn suppression_vector(
    field: &PresenceField,
    masked_indices: &[usize],
    num_keys: usize,
) -> Result<SuppressionVector> {
    let mut coefficients = vec![1.0; num_keys];
    for &i in masked_indices {
        let p = field.get(i).ok_or_else(|| {
            Error::InvalidInput(format!("presence field has no score for masked token {i}"))
        })?;
        *coefficients
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, len: num_keys })? = (1.0 - p).clamp(0.0, 1.0);
    }
    Ok(SuppressionVector { coefficients })
}

/// Checks a logits block is square before it is used as self-attention.
pub fn ensure_self_attention(logits: &AttentionLogits) -> Result<()> {
    logits.ensure_square()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layer() -> LayerId {
        LayerId::new("test")
    }

    fn logits(rows: &[&[f64]]) -> AttentionLogits {
        let keys = rows[0].len();
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        AttentionLogits::new(values, 1, rows.len(), keys, layer(), 1).unwrap()
    }

    fn map_from(values: Vec<f64>, heads: usize, n: usize, branch: Branch) -> AttentionMap {
        AttentionMap::new(values, heads, n, n, branch, layer(), 1).unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_rows() {
        let m = row_softmax(&logits(&[&[0.0, 0.0], &[0.0, 0.0]]), Branch::Target);
        assert_eq!(m.values(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn ln2_row_gives_two_thirds() {
        let m = row_softmax(&logits(&[&[std::f64::consts::LN_2, 0.0]]), Branch::Target);
        assert!((m.values()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.values()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let err = AttentionLogits::square(vec![0.0, f64::NAN, 0.0, 0.0], 2, layer(), 1);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let err = AttentionLogits::square(vec![0.0, f64::INFINITY, 0.0, 0.0], 2, layer(), 1);
        assert!(err.is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let m = row_softmax(&logits(&[&[30.0, -30.0, 700.0]]), Branch::Target);
        assert!(m.values().iter().all(|v| v.is_finite()));
        assert!((m.values()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn descriptor_of_identity_like_map() {
        let n = 4;
        let eps = 1e-3;
        let values: Vec<f64> = (0..n * n)
            .map(|k| if k / n == k % n { 1.0 - 3.0 * eps } else { eps })
            .collect();
        let m = map_from(values, 1, n, Branch::Source);
        let d = extract_descriptor(&m, 0, DescriptorAxis::KeyColumn).unwrap();
        assert!((d.values[0] - 0.997).abs() < 1e-12);
        assert!(d.values[1..].iter().all(|&v| (v - eps).abs() < 1e-12));
    }

    #[test]
    fn descriptor_of_uniform_map() {
        let n = 5;
        let m = map_from(vec![0.2; 25], 1, n, Branch::Source);
        for axis in [DescriptorAxis::KeyColumn, DescriptorAxis::QueryRow] {
            let d = extract_descriptor(&m, 3, axis).unwrap();
            assert!(d.values.iter().all(|&v| (v - 0.2).abs() < 1e-15));
            assert_eq!(d.values.len(), n);
        }
    }

    #[test]
    fn two_head_descriptor_is_head_mean() {
        let h1 = [0.7, 0.3, 0.1, 0.9];
        let h2 = [0.2, 0.8, 0.6, 0.4];
        let values: Vec<f64> = h1.iter().chain(&h2).copied().collect();
        let m = map_from(values, 2, 2, Branch::Source);
        let d = extract_descriptor(&m, 1, DescriptorAxis::KeyColumn).unwrap();
        // column 1 of each head: h1 -> [0.3, 0.9], h2 -> [0.8, 0.4]
        assert_eq!(d.values, vec![(0.3 + 0.8) / 2.0, (0.9 + 0.4) / 2.0]);
        let r = extract_descriptor(&m, 1, DescriptorAxis::QueryRow).unwrap();
        assert_eq!(r.values, vec![(0.1 + 0.6) / 2.0, (0.9 + 0.4) / 2.0]);
    }

    #[test]
    fn descriptor_index_out_of_range() {
        let m = map_from(vec![0.5; 4], 1, 2, Branch::Source);
        assert!(matches!(
            extract_descriptor(&m, 2, DescriptorAxis::KeyColumn),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    fn desc(v: &[f64]) -> TokenDescriptor {
        TokenDescriptor::new(v.to_vec(), 0, DescriptorAxis::KeyColumn)
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&desc(&[0.3, 0.4]), &desc(&[0.3, 0.4])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&desc(&[1.0, 0.0]), &desc(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&desc(&[1.0, 1.0, 0.0]), &desc(&[1.0, 0.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        assert_eq!(cosine_similarity(&desc(&[0.0, 0.0]), &desc(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&desc(&[1e-13, 0.0]), &desc(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(cosine_similarity(&desc(&[1.0]), &desc(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn presence_identical_maps_is_one() {
        let v = vec![0.1, 0.6, 0.3, 0.2, 0.2, 0.6, 0.5, 0.25, 0.25];
        let src = map_from(v.clone(), 1, 3, Branch::Source);
        let tgt = map_from(v, 1, 3, Branch::Target);
        let f = presence_scores(&src, &tgt, &[0, 2], DescriptorAxis::KeyColumn).unwrap();
        assert_eq!(f.len(), 2);
        for p in f.scores().values() {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn presence_orthogonal_descriptors_is_zero() {
        // Source: all queries attend to token 0; target: all attend to token 1.
        let src = map_from(vec![1.0, 0.0, 1.0, 0.0], 1, 2, Branch::Source);
        let tgt = map_from(vec![0.0, 1.0, 0.0, 1.0], 1, 2, Branch::Target);
        let f = presence_scores(&src, &tgt, &[0], DescriptorAxis::QueryRow).unwrap();
        assert_eq!(f.get(0), Some(0.0));
    }

    #[test]
    fn presence_half_mixture_is_inverse_sqrt2() {
        // Query-row descriptors: src row 0 = s, tgt row 0 = 0.5 s + 0.5 b with
        // s ⟂ b and equal norms.
        let s = [0.5, 0.5, 0.0, 0.0];
        let b = [0.0, 0.0, 0.5, 0.5];
        let mix: Vec<f64> = s.iter().zip(&b).map(|(a, c)| 0.5 * a + 0.5 * c).collect();
        let mut src = vec![0.25; 16];
        let mut tgt = vec![0.25; 16];
        src[..4].copy_from_slice(&s);
        tgt[..4].copy_from_slice(&mix);
        let src = map_from(src, 1, 4, Branch::Source);
        let tgt = map_from(tgt, 1, 4, Branch::Target);
        let f = presence_scores(&src, &tgt, &[0], DescriptorAxis::QueryRow).unwrap();
        assert!((f.get(0).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn presence_rejects_mismatched_inputs() {
        let src = map_from(vec![0.5; 4], 1, 2, Branch::Source);
        let tgt3 = map_from(vec![1.0 / 3.0; 9], 1, 3, Branch::Target);
        assert!(matches!(
            presence_scores(&src, &tgt3, &[0], DescriptorAxis::KeyColumn),
            Err(Error::ShapeMismatch { .. })
        ));
        let tgt = map_from(vec![0.5; 4], 1, 2, Branch::Target);
        assert!(matches!(
            presence_scores(&src, &tgt, &[5], DescriptorAxis::KeyColumn),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn suppression_vector_examples() {
        let field = PresenceField::from_scores(layer(), 1, [(1, 0.3), (2, 1.0)].into());
        let eta = suppression_vector(&field, &[1, 2], 4).unwrap();
        assert!((eta.coefficients()[1] - 0.7).abs() < 1e-15);
        assert_eq!(eta.coefficients()[2], 0.0);
        assert_eq!(eta.coefficients()[0], 1.0);
        assert_eq!(eta.coefficients()[3], 1.0);
    }

    #[test]
    fn suppression_vector_requires_full_domain() {
        let field = PresenceField::from_scores(layer(), 1, [(1, 0.3)].into());
        assert!(suppression_vector(&field, &[1, 2], 4).is_err());
    }

    #[test]
    fn presence_scores_are_clamped() {
        let field = PresenceField::from_scores(layer(), 1, [(0, 1.0 + 1e-12), (1, -1e-9)].into());
        assert_eq!(field.get(0), Some(1.0));
        assert_eq!(field.get(1), Some(0.0));
    }

    #[test]
    fn modulated_examples() {
        let l = logits(&[&[0.3, 0.3, 0.3], &[-2.0, -2.0, -2.0]]);
        let eta = SuppressionVector::new(vec![1.0, 1.0, 0.5]).unwrap();
        for m in [
            modulated_softmax(&l, &eta, Branch::Target).unwrap(),
            logit_shift_softmax(&l, &eta, Branch::Target).unwrap(),
        ] {
            for row in m.values().chunks(3) {
                assert!((row[0] - 0.4).abs() < 1e-15);
                assert!((row[1] - 0.4).abs() < 1e-15);
                assert!((row[2] - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_eta_is_bitwise_softmax() {
        let l = logits(&[&[1.5, -0.25, 3.0, 0.0], &[9.0, 8.5, -7.0, 0.1]]);
        let plain = row_softmax(&l, Branch::Target);
        let m = modulated_softmax(&l, &SuppressionVector::ones(4), Branch::Target).unwrap();
        assert!(m.bitwise_eq(&plain));
        let s = logit_shift_softmax(&l, &SuppressionVector::ones(4), Branch::Target).unwrap();
        assert!(s.bitwise_eq(&plain));
    }

    #[test]
    fn zero_eta_column_is_exactly_zero() {
        let l = logits(&[&[50.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        let eta = SuppressionVector::new(vec![0.0, 1.0, 1.0]).unwrap();
        let m = modulated_softmax(&l, &eta, Branch::Target).unwrap();
        for row in m.values().chunks(3) {
            assert_eq!(row[0], 0.0);
            assert!((row[1] + row[2] - 1.0).abs() < 1e-15);
        }
        assert!(matches!(
            logit_shift_softmax(&l, &eta, Branch::Target),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn degenerate_row_falls_back_to_uniform() {
        let l = logits(&[&[0.0, 0.0, 0.0]]);
        let eta = SuppressionVector::new(vec![1e-30, 0.0, 1e-30]).unwrap();
        let m = modulated_softmax(&l, &eta, Branch::Target).unwrap();
        assert_eq!(m.values(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn all_zero_eta_is_rejected() {
        let l = logits(&[&[0.0, 0.0]]);
        assert!(modulated_softmax(&l, &SuppressionVector::new(vec![0.0, 0.0]).unwrap(), Branch::Target).is_err());
    }

    #[test]
    fn eta_length_is_checked() {
        let l = logits(&[&[0.0, 0.0]]);
        assert!(modulated_softmax(&l, &SuppressionVector::ones(3), Branch::Target).is_err());
        assert!(SuppressionVector::new(vec![1.5]).is_err());
    }

    fn logits_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec(-30.0..30.0f64, n * n)))
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic((n, v) in logits_strategy(7)) {
            let l = AttentionLogits::square(v, n, layer(), 1).unwrap();
            let m = row_softmax(&l, Branch::Source);
            prop_assert!(m.validate().is_ok());
        }

        #[test]
        fn modulated_equals_logit_shift(
            (n, v) in logits_strategy(6),
            eta_seed in prop::collection::vec(1e-6..=1.0f64, 6),
        ) {
            let l = AttentionLogits::square(v, n, layer(), 1).unwrap();
            let eta = SuppressionVector::new(eta_seed[..n].to_vec()).unwrap();
            let a = modulated_softmax(&l, &eta, Branch::Target).unwrap();
            let b = logit_shift_softmax(&l, &eta, Branch::Target).unwrap();
            prop_assert!(a.validate().is_ok());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn modulated_is_shift_invariant(
            (n, v) in logits_strategy(5),
            eta_seed in prop::collection::vec(0.0..=1.0f64, 5),
            shift in -20.0..20.0f64,
        ) {
            let mut eta_v = eta_seed[..n].to_vec();
            eta_v[0] = eta_v[0].max(0.1);
            let eta = SuppressionVector::new(eta_v).unwrap();
            let l = AttentionLogits::square(v.clone(), n, layer(), 1).unwrap();
            let shifted: Vec<f64> = v.iter().enumerate().map(|(k, a)| a + shift * (1 + k / n) as f64).collect();
            let ls = AttentionLogits::square(shifted, n, layer(), 1).unwrap();
            let a = modulated_softmax(&l, &eta, Branch::Target).unwrap();
            let b = modulated_softmax(&ls, &eta, Branch::Target).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn weight_is_monotone_in_own_eta(
            (n, v) in logits_strategy(5),
            others in prop::collection::vec(0.05..=1.0f64, 5),
            key in 0usize..5,
        ) {
            let key = key % n;
            let l = AttentionLogits::square(v, n, layer(), 1).unwrap();
            let mut prev: Option<AttentionMap> = None;
            for step in 0..=20 {
                let mut eta_v = others[..n].to_vec();
                eta_v[key] = step as f64 / 20.0;
                if n == 1 && step == 0 { continue; }
                let m = modulated_softmax(&l, &SuppressionVector::new(eta_v).unwrap(), Branch::Target).unwrap();
                if let Some(p) = &prev {
                    for q in 0..n {
                        prop_assert!(m.weight(0, q, key) >= p.weight(0, q, key) - 1e-15);
                    }
                }
                prev = Some(m);
            }
        }

        #[test]
        fn presence_in_unit_interval((n, a) in logits_strategy(6), b in prop::collection::vec(-10.0..10.0f64, 36)) {
            let la = AttentionLogits::square(a, n, layer(), 1).unwrap();
            let lb = AttentionLogits::square(b[..n * n].to_vec(), n, layer(), 1).unwrap();
            let src = row_softmax(&la, Branch::Source);
            let tgt = row_softmax(&lb, Branch::Target);
            let idx: Vec<usize> = (0..n).collect();
            for axis in [DescriptorAxis::KeyColumn, DescriptorAxis::QueryRow] {
                let f = presence_scores(&src, &tgt, &idx, axis).unwrap();
                prop_assert!(f.scores().values().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
