use crate::error::{arg_err, Result};
use crate::numerics::dot_mixed;
use crate::rope::RopeParams;

use super::cache::KVCacheHead;

/// One post-softmax attention row together with the output it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub query_position: u32,
    /// Weights over the causally visible cache prefix.
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
}

pub(crate) fn rotate_query(query_pre: &[f32], position: u32, rope: &RopeParams) -> Result<Vec<f64>> {
    if query_pre.len() != rope.head_dim() {
        return Err(arg_err!(
            "query has length {}, expected {}",
            query_pre.len(),
            rope.head_dim()
        ));
    }
    let mut q = vec![0.0; query_pre.len()];
    rope.rotate_into(query_pre, position, &mut q);
    Ok(q)
}

/// Scaled exact scores of `q_post` against the listed cache rows.
pub(crate) fn exact_scores<I>(q_post: &[f64], cache: &KVCacheHead, rows: I, scale: f64) -> Vec<f64>
where
    I: IntoIterator<Item = usize>,
{
    rows.into_iter()
        .map(|t| dot_mixed(q_post, cache.key_post(t)) * scale)
        .collect()
}

/// Softmax over `scores` (one per listed row) and the weighted sum of the
/// corresponding values. Returns `(weights, output)`.
pub(crate) fn weighted_values<I>(scores: &[f64], cache: &KVCacheHead, rows: I) -> (Vec<f64>, Vec<f64>)
where
    I: IntoIterator<Item = usize>,
{
    let d = cache.head_dim();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut out = vec![0.0f64; d];
    for (w, t) in weights.iter_mut().zip(rows) {
        *w /= z;
        for (o, v) in out.iter_mut().zip(cache.value(t)) {
            *o += *w * *v as f64;
        }
    }
    (weights, out)
}

/// Exact causal attention of one query over every cached token whose
/// position is at or before `query_position`.
pub fn dense_attention(
    query_pre: &[f32],
    query_position: u32,
    cache: &KVCacheHead,
    scale: f64,
) -> Result<AttentionRow> {
    let visible = cache.visible_len(query_position);
    if visible == 0 {
        return Err(arg_err!(
            "no cached token visible from position {query_position}"
        ));
    }
    let q = rotate_query(query_pre, query_position, cache.rope())?;
    let scores = exact_scores(&q, cache, 0..visible, scale);
    let (weights, output) = weighted_values(&scores, cache, 0..visible);
    Ok(AttentionRow {
        query_position,
        weights,
        output,
    })
}
