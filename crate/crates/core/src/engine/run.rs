use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::calibration::HeadPartition;
use crate::error::{arg_err, Error, Result};
use crate::indexer::Projector;
use crate::workload::{dense_attention, qhead_to_kvhead, HeadId, HeadRole, KVCacheHead, ModelGeometry, Workload};

use super::{local_head_decode, retrieval_head_decode, DecodeConfig, HeadDecode, RetrievalIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillRow {
    pub head: HeadId,
    pub position: u32,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    /// One cache per `(layer, kv)`, indexed `layer * n_kv_heads + kv`.
    pub caches: Vec<KVCacheHead>,
    pub rows: Vec<PrefillRow>,
}

fn check_partition(geometry: &ModelGeometry, partition: &HeadPartition) -> Result<()> {
    let n = geometry.total_q_heads();
    if partition.scores.len() != n || partition.retrieval_set.len() + partition.local_set.len() != n {
        return Err(arg_err!("partition covers {} heads, geometry has {n}", partition.scores.len()));
    }
    Ok(())
}

/// Cache the first `prompt_len` tokens of every KV head and compute head
/// outputs at `output_positions`: dense for retrieval heads, sinks plus
/// window for local heads.
pub fn prefill(
    workload: &Workload,
    prompt_len: usize,
    partition: &HeadPartition,
    output_positions: &[u32],
) -> Result<PrefillOutput> {
    let g = &workload.geometry;
    check_partition(g, partition)?;
    if prompt_len == 0 || prompt_len > workload.seq_len() {
        return Err(arg_err!("prompt length must lie in 1..={}", workload.seq_len()));
    }
    if let Some(p) = output_positions.iter().find(|p| **p as usize >= prompt_len) {
        return Err(arg_err!("output position {p} lies beyond the prompt"));
    }
    let caches: Vec<KVCacheHead> = (0..g.n_layers * g.n_kv_heads)
        .into_par_iter()
        .map(|f| workload.build_cache(f / g.n_kv_heads, f % g.n_kv_heads, prompt_len))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u32)> = (0..g.total_q_heads())
        .flat_map(|h| output_positions.iter().map(move |p| (h, *p)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(flat, pos)| {
            let head = HeadId::from_flat(flat, g);
            let cache = &caches[head.layer * g.n_kv_heads + qhead_to_kvhead(g, head.head)?];
            let q = workload.query(head, pos as usize);
            let output = if partition.is_retrieval(flat) {
                dense_attention(q, pos, cache, g.scale())?.output
            } else {
                local_head_decode(q, pos, cache, g.window, g.n_sinks, g.scale())?.output
            };
            Ok(PrefillRow {
                head,
                position: pos,
                output,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PrefillOutput { caches, rows })
}

/// One traced decode step of one query head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTraceEntry {
    pub layer: usize,
    pub head: usize,
    pub position: u32,
    pub role: HeadRole,
    pub visible: usize,
    pub tokens_selected: usize,
    pub projected_mass: Option<f64>,
    /// Mass of the active set under the full dense row.
    pub true_mass: Option<f64>,
    pub output: Vec<f64>,
    pub active_set: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub entries: Vec<DecodeTraceEntry>,
}

impl DecodeTrace {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Decoder over a partitioned model. Every retrieval head needs a projector.
#[derive(Debug, Clone)]
pub struct SparseEngine {
    pub geometry: ModelGeometry,
    pub partition: HeadPartition,
    /// Keyed by flat query-head index.
    pub projectors: BTreeMap<usize, Projector>,
    pub config: DecodeConfig,
}

impl SparseEngine {
    pub fn new(
        geometry: ModelGeometry,
        partition: HeadPartition,
        projectors: BTreeMap<usize, Projector>,
        config: DecodeConfig,
    ) -> Result<Self> {
        geometry.validate()?;
        config.validate()?;
        check_partition(&geometry, &partition)?;
        for &h in &partition.retrieval_set {
            let p = projectors
                .get(&h)
                .ok_or_else(|| arg_err!("retrieval head {} has no projector", HeadId::from_flat(h, &geometry)))?;
            if p.d != geometry.head_dim || p.r != geometry.low_dim {
                return Err(arg_err!(
                    "projector for {} has r = {}, d = {}; geometry expects r = {}, d = {}",
                    HeadId::from_flat(h, &geometry),
                    p.r,
                    p.d,
                    geometry.low_dim,
                    geometry.head_dim
                ));
            }
        }
        Ok(SparseEngine {
            geometry,
            partition,
            projectors,
            config,
        })
    }

    /// Same projector for every retrieval head.
    pub fn with_shared_projector(
        geometry: ModelGeometry,
        partition: HeadPartition,
        projector: Projector,
        config: DecodeConfig,
    ) -> Result<Self> {
        let projectors = partition.retrieval_set.iter().map(|h| (*h, projector.clone())).collect();
        SparseEngine::new(geometry, partition, projectors, config)
    }

    fn decode_head(
        &self,
        flat: usize,
        query: &[f32],
        position: u32,
        cache: &KVCacheHead,
        index: Option<&RetrievalIndex>,
    ) -> Result<HeadDecode> {
        let g = &self.geometry;
        match index {
            Some(ix) if self.partition.is_retrieval(flat) => {
                retrieval_head_decode(query, position, cache, ix, &self.config, g.scale())
            }
            None if !self.partition.is_retrieval(flat) => {
                local_head_decode(query, position, cache, g.window, g.n_sinks, g.scale())
            }
            _ => Err(Error::Internal(format!("index state disagrees with role of head {flat}"))),
        }
    }

    /// Prefill `prompt_len` tokens, then decode every remaining token of the
    /// workload, appending each to the caches before its queries run.
    pub fn run(&self, workload: &Workload, prompt_len: usize) -> Result<DecodeTrace> {
        let g = &self.geometry;
        if workload.geometry != *g {
            return Err(arg_err!("workload geometry differs from engine geometry"));
        }
        let mut caches = prefill(workload, prompt_len, &self.partition, &[])?.caches;
        let n_heads = g.total_q_heads();
        let kv_of: Vec<usize> = (0..n_heads)
            .map(|f| {
                let h = HeadId::from_flat(f, g);
                Ok(h.layer * g.n_kv_heads + qhead_to_kvhead(g, h.head)?)
            })
            .collect::<Result<_>>()?;
        let mut indices: Vec<Option<RetrievalIndex>> = (0..n_heads)
            .map(|f| match self.projectors.get(&f) {
                Some(p) if self.partition.is_retrieval(f) => RetrievalIndex::new(p.clone(), &caches[kv_of[f]]).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;

        let mut trace = DecodeTrace::default();
        for (step, t) in (prompt_len..workload.seq_len()).enumerate() {
            for (f, cache) in caches.iter_mut().enumerate() {
                let (layer, kv) = (f / g.n_kv_heads, f % g.n_kv_heads);
                cache.append(workload.key(layer, kv, t), workload.value(layer, kv, t), t as u32)?;
            }
            for (f, ix) in indices.iter_mut().enumerate() {
                if let Some(ix) = ix {
                    let h = HeadId::from_flat(f, g);
                    ix.append(workload.key(h.layer, kv_of[f] % g.n_kv_heads, t));
                }
            }
            let traced = step % self.config.trace_every == 0;
            let entries: Vec<DecodeTraceEntry> = (0..n_heads)
                .into_par_iter()
                .map(|f| {
                    let head = HeadId::from_flat(f, g);
                    let q = workload.query(head, t);
                    let cache = &caches[kv_of[f]];
                    let out = self.decode_head(f, q, t as u32, cache, indices[f].as_ref())?;
                    let true_mass = if traced && self.config.record_true_mass {
                        let dense = dense_attention(q, t as u32, cache, g.scale())?;
                        Some(out.active_set.iter().map(|i| dense.weights[*i]).sum::<f64>().min(1.0))
                    } else {
                        None
                    };
                    Ok(DecodeTraceEntry {
                        layer: head.layer,
                        head: head.head,
                        position: t as u32,
                        role: self.partition.role(f),
                        visible: out.visible,
                        tokens_selected: out.active_set.len(),
                        projected_mass: out.projected_mass,
                        true_mass,
                        output: out.output,
                        active_set: out.active_set.iter().map(|i| *i as u32).collect(),
                    })
                })
                .collect::<Result<_>>()?;
            if traced {
                trace.entries.extend(entries);
            }
        }
        Ok(trace)
    }
}
