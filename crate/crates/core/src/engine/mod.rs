//! Sparse attention at inference: dense prefill, top-p decode for retrieval
//! heads, sink plus window attention for local heads, and the sparsity and
//! attention-mass metrics over decode traces.

mod metrics;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::indexer::Projector;
use crate::numerics::dot_mixed;
use crate::selection::{histogram_threshold, split_block_stats, top_k_static, top_p_exact, SelectionResult};
use crate::workload::{exact_scores, rotate_query, weighted_values, KVCacheHead, ModelGeometry};

pub use metrics::{
    attention_mass_report, compute_sparsity, head_summaries, mass_budget_sweep, memory_sparsity, BudgetPoint,
    HeadSummary, SparsityReport,
};
pub use run::{prefill, DecodeTrace, DecodeTraceEntry, PrefillOutput, PrefillRow, SparseEngine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    Exact,
    Histogram,
    TopK,
}

impl std::str::FromStr for SelectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SelectorMode::Exact),
            "histogram" => Ok(SelectorMode::Histogram),
            "top_k" | "top-k" => Ok(SelectorMode::TopK),
            other => Err(arg_err!("unknown selector mode '{other}' (expected exact, histogram or top_k)")),
        }
    }
}

impl std::fmt::Display for SelectorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectorMode::Exact => "exact",
            SelectorMode::Histogram => "histogram",
            SelectorMode::TopK => "top_k",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: SelectorMode,
    pub p: f64,
    /// Budget for `top_k` mode.
    pub k: usize,
    pub block_size: usize,
    /// KV-range splits for block statistics in histogram mode.
    pub n_splits: usize,
    /// Compute the dense row at traced steps to report true attention mass.
    pub record_true_mass: bool,
    /// Trace every n-th decode step.
    pub trace_every: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: SelectorMode::Histogram,
            p: 0.9,
            k: 4096,
            block_size: 64,
            n_splits: 4,
            record_true_mass: true,
            trace_every: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(arg_err!("p must lie in (0, 1], got {}", self.p));
        }
        if self.k == 0 || self.block_size == 0 || self.n_splits == 0 || self.trace_every == 0 {
            return Err(arg_err!("k, block_size, n_splits and trace_every must be positive"));
        }
        Ok(())
    }
}

/// Select tokens from projected scores with the configured selector.
pub fn select(scores: &[f64], config: &DecodeConfig) -> Result<SelectionResult> {
    match config.mode {
        SelectorMode::Exact => top_p_exact(scores, config.p),
        SelectorMode::TopK => top_k_static(scores, config.k),
        SelectorMode::Histogram => {
            let blocks = split_block_stats(scores, config.block_size, config.n_splits)?;
            histogram_threshold(&blocks, config.p)
        }
    }
}

/// A projector together with the projected keys of one cache, kept in step
/// with the cache so decode scores cost `r` per token.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    projector: Projector,
    keys: Vec<f32>,
}

impl RetrievalIndex {
    pub fn new(projector: Projector, cache: &KVCacheHead) -> Result<Self> {
        if projector.d != cache.head_dim() {
            return Err(arg_err!(
                "projector dimension {} does not match cache dimension {}",
                projector.d,
                cache.head_dim()
            ));
        }
        let keys = projector.project_cache(cache);
        Ok(RetrievalIndex { projector, keys })
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.projector.r
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn append(&mut self, key_pre: &[f32]) {
        let b = self.projector.project_key(key_pre);
        self.keys.extend(b.iter().map(|x| *x as f32));
    }

    /// Projected scores of the first `visible` tokens.
    pub fn scores(&self, query_pre: &[f32], visible: usize) -> Result<Vec<f64>> {
        if query_pre.len() != self.projector.d {
            return Err(arg_err!("query has length {}, projector expects {}", query_pre.len(), self.projector.d));
        }
        if visible > self.len() {
            return Err(Error::Internal(format!("index holds {} keys, {visible} requested", self.len())));
        }
        let r = self.projector.r;
        let a: Vec<f64> = self
            .projector
            .project_query(query_pre)
            .iter()
            .map(|x| x * self.projector.score_scale)
            .collect();
        Ok(self.keys[..visible * r].chunks_exact(r).map(|k| dot_mixed(&a, k)).collect())
    }
}

/// Output of one head at one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDecode {
    pub output: Vec<f64>,
    /// Cache row indices attended, ascending.
    pub active_set: Vec<usize>,
    /// Mass of the active set under the projected-score softmax; retrieval heads only.
    pub projected_mass: Option<f64>,
    pub visible: usize,
}

/// Exact softmax attention restricted to `rows` (ascending cache indices).
pub fn restricted_attention(
    query_pre: &[f32],
    query_position: u32,
    cache: &KVCacheHead,
    rows: &[usize],
    scale: f64,
) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Internal("attention over an empty token set".into()));
    }
    let q = rotate_query(query_pre, query_position, cache.rope())?;
    let scores = exact_scores(&q, cache, rows.iter().copied(), scale);
    Ok(weighted_values(&scores, cache, rows.iter().copied()).1)
}

/// Top-p decode for a retrieval head: select over projected scores, then
/// attend exactly over the selected tokens.
pub fn retrieval_head_decode(
    query_pre: &[f32],
    query_position: u32,
    cache: &KVCacheHead,
    index: &RetrievalIndex,
    config: &DecodeConfig,
    scale: f64,
) -> Result<HeadDecode> {
    let visible = cache.visible_len(query_position);
    if visible == 0 {
        return Err(arg_err!("no cached token visible from position {query_position}"));
    }
    let scores = index.scores(query_pre, visible)?;
    let sel = select(&scores, config)?;
    if sel.is_empty() {
        return Err(Error::Internal("selector returned an empty active set".into()));
    }
    let output = restricted_attention(query_pre, query_position, cache, &sel.active_set, scale)?;
    Ok(HeadDecode {
        output,
        active_set: sel.active_set,
        projected_mass: Some(sel.covered_mass),
        visible,
    })
}

/// Cache rows a local head attends from a prefix of `visible` rows: the
/// first `n_sinks` rows together with the trailing `window` rows.
pub fn local_indices(visible: usize, window: usize, n_sinks: usize) -> Vec<usize> {
    let sinks = n_sinks.min(visible);
    let start = visible.saturating_sub(window).max(sinks);
    (0..sinks).chain(start..visible).collect()
}

pub fn local_head_decode(
    query_pre: &[f32],
    query_position: u32,
    cache: &KVCacheHead,
    window: usize,
    n_sinks: usize,
    scale: f64,
) -> Result<HeadDecode> {
    let visible = cache.visible_len(query_position);
    if visible == 0 {
        return Err(arg_err!("no cached token visible from position {query_position}"));
    }
    let rows = local_indices(visible, window, n_sinks);
    if rows.is_empty() {
        return Err(arg_err!("window and sink count are both zero"));
    }
    let output = restricted_attention(query_pre, query_position, cache, &rows, scale)?;
    Ok(HeadDecode {
        output,
        active_set: rows,
        projected_mass: None,
        visible,
    })
}

/// Projector reading a workload's content subspace (the last `content_dim`
/// coordinates) with the attention scale. Stands in for a trained projector
/// on synthetic workloads, whose retrieval signal lives in that subspace.
pub fn content_projector(geometry: &ModelGeometry, content_dim: usize) -> Result<Projector> {
    let d = geometry.head_dim;
    if content_dim == 0 || content_dim > d {
        return Err(arg_err!("content_dim must lie in 1..={d}"));
    }
    let dims: Vec<usize> = (d - content_dim..d).collect();
    let mut p = Projector::coordinate_selector(d, &dims)?;
    p.score_scale = geometry.scale();
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeParams;
    use crate::seed::SeedTree;
    use crate::workload::dense_attention;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cache(d: usize, n: usize, seed: u64) -> KVCacheHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vals: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pos: Vec<u32> = (0..n as u32).collect();
        KVCacheHead::from_rows(RopeParams::with_default_base(d).unwrap(), &keys, &vals, &pos).unwrap()
    }

    fn query(d: usize, seed: u64, gain: f32) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-1.0..1.0) * gain).collect()
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn local_index_sets() {
        assert_eq!(local_indices(10, 2, 4), vec![0, 1, 2, 3, 8, 9]);
        assert_eq!(local_indices(5, 8, 4), vec![0, 1, 2, 3, 4]);
        assert_eq!(local_indices(6, 3, 4), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(local_indices(10, 1, 0), vec![9]);
        assert_eq!(local_indices(2, 0, 4), vec![0, 1]);
    }

    #[test]
    fn local_decode_examples() {
        let d = 16;
        let cache = random_cache(d, 100, 1);
        let q = query(d, 2, 3.0);
        let scale = 0.25;
        // Everything visible lies in sinks and window.
        let dense = dense_attention(&q, 9, &cache, scale).unwrap();
        let local = local_head_decode(&q, 9, &cache, 8, 4, scale).unwrap();
        assert!(max_abs(&local.output, &dense.output) < 1e-12);
        // Self only.
        let own = local_head_decode(&q, 50, &cache, 1, 0, scale).unwrap();
        let v: Vec<f64> = cache.value(50).iter().map(|x| *x as f64).collect();
        assert!(max_abs(&own.output, &v) < 1e-12);
        // Restricted oracle on the 8-token sub-cache.
        let r = local_head_decode(&q, 99, &cache, 4, 4, scale).unwrap();
        assert_eq!(r.active_set, vec![0, 1, 2, 3, 96, 97, 98, 99]);
        let sub = cache.subset(&r.active_set).unwrap();
        let oracle = dense_attention(&q, 99, &sub, scale).unwrap();
        assert!(max_abs(&r.output, &oracle.output) < 1e-6);
    }

    #[test]
    fn full_mass_decode_equals_dense() {
        let d = 32;
        let cache = random_cache(d, 300, 3);
        let index = RetrievalIndex::new(Projector::gaussian(8, d, SeedTree::new(1)), &cache).unwrap();
        let q = query(d, 4, 2.0);
        let cfg = DecodeConfig {
            mode: SelectorMode::Exact,
            p: 1.0,
            ..Default::default()
        };
        let r = retrieval_head_decode(&q, 299, &cache, &index, &cfg, 0.2).unwrap();
        assert_eq!(r.active_set.len(), 300);
        let dense = dense_attention(&q, 299, &cache, 0.2).unwrap();
        assert!(max_abs(&r.output, &dense.output) < 1e-5);
    }

    #[test]
    fn single_token_cache() {
        let cache = random_cache(8, 1, 5);
        let index = RetrievalIndex::new(Projector::gaussian(4, 8, SeedTree::new(2)), &cache).unwrap();
        for mode in [SelectorMode::Exact, SelectorMode::Histogram, SelectorMode::TopK] {
            let cfg = DecodeConfig {
                mode,
                ..Default::default()
            };
            let r = retrieval_head_decode(&query(8, 6, 1.0), 0, &cache, &index, &cfg, 0.3).unwrap();
            let v: Vec<f64> = cache.value(0).iter().map(|x| *x as f64).collect();
            assert!(max_abs(&r.output, &v) < 1e-12);
        }
    }

    #[test]
    fn histogram_decode_matches_restricted_oracle() {
        let d = 32;
        let cache = random_cache(d, 4096, 7);
        let mut proj = Projector::gaussian(16, d, SeedTree::new(3));
        proj.score_scale = 3.0;
        let index = RetrievalIndex::new(proj, &cache).unwrap();
        let cfg = DecodeConfig::default();
        for s in 0..4 {
            let q = query(d, 10 + s, 2.0);
            let r = retrieval_head_decode(&q, 4095, &cache, &index, &cfg, 0.2).unwrap();
            assert!(r.projected_mass.unwrap() >= 0.9);
            assert!(r.active_set.len() < 4096);
            let sub = cache.subset(&r.active_set).unwrap();
            let oracle = dense_attention(&q, 4095, &sub, 0.2).unwrap();
            assert!(max_abs(&r.output, &oracle.output) < 1e-6);
        }
    }

    #[test]
    fn index_tracks_appends() {
        let d = 8;
        let cache = random_cache(d, 20, 9);
        let p = Projector::gaussian(4, d, SeedTree::new(5));
        let mut index = RetrievalIndex::new(p.clone(), &cache.subset(&(0..10).collect::<Vec<_>>()).unwrap()).unwrap();
        for t in 10..20 {
            index.append(cache.key_pre(t));
        }
        assert_eq!(index, RetrievalIndex::new(p, &cache).unwrap());
        assert!(index.scores(&[0.0; 8], 21).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("histogram".parse::<SelectorMode>().unwrap(), SelectorMode::Histogram);
        assert_eq!("top_k".parse::<SelectorMode>().unwrap(), SelectorMode::TopK);
        assert!("dense".parse::<SelectorMode>().is_err());
        assert_eq!(SelectorMode::Exact.to_string(), "exact");
    }
}
