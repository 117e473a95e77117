use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::selection::{top_k_static, top_p_exact};
use crate::workload::{dense_attention, AttentionRow, HeadId, HeadRole, ModelGeometry, Workload};

use super::{DecodeTrace, DecodeTraceEntry};

/// `1 - mean(attended / visible)` over traced query heads and positions.
pub fn compute_sparsity(entries: &[DecodeTraceEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(arg_err!("compute sparsity over an empty trace"));
    }
    let mean = entries
        .iter()
        .map(|e| e.tokens_selected as f64 / e.visible as f64)
        .sum::<f64>()
        / entries.len() as f64;
    Ok(1.0 - mean)
}

/// `1 - mean(retained / visible)` over `(kv head, position)` groups, where
/// retained is the union of the token sets of the query heads in the group.
pub fn memory_sparsity(entries: &[DecodeTraceEntry], geometry: &ModelGeometry) -> Result<f64> {
    if entries.is_empty() {
        return Err(arg_err!("memory sparsity over an empty trace"));
    }
    let mut groups: BTreeMap<(usize, usize, u32), (BTreeSet<u32>, usize)> = BTreeMap::new();
    for e in entries {
        let kv = geometry.qhead_to_kvhead(e.head)?;
        let g = groups.entry((e.layer, kv, e.position)).or_default();
        g.0.extend(e.active_set.iter().copied());
        g.1 = g.1.max(e.visible);
    }
    let mean = groups
        .values()
        .map(|(set, visible)| set.len() as f64 / *visible as f64)
        .sum::<f64>()
        / groups.len() as f64;
    Ok(1.0 - mean)
}

/// Dense-row mass of a trace entry's active set.
pub fn attention_mass_report(entry: &DecodeTraceEntry, dense_row: &AttentionRow) -> Result<f64> {
    if dense_row.query_position != entry.position {
        return Err(arg_err!(
            "dense row at position {} does not match trace position {}",
            dense_row.query_position,
            entry.position
        ));
    }
    if dense_row.weights.len() != entry.visible {
        return Err(arg_err!(
            "dense row covers {} tokens, trace entry {}",
            dense_row.weights.len(),
            entry.visible
        ));
    }
    let mut mass = 0.0;
    for &i in &entry.active_set {
        mass += dense_row
            .weights
            .get(i as usize)
            .ok_or_else(|| arg_err!("active token {i} outside the dense row"))?;
    }
    Ok(mass.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub compute_sparsity: f64,
    pub memory_sparsity: f64,
    /// Mean active-set size per flat query head; NaN-free, heads without
    /// traced steps report 0.
    pub per_head_active: Vec<f64>,
    pub decode_steps: usize,
    pub min_projected_mass: Option<f64>,
    pub mean_true_mass_retrieval: Option<f64>,
}

impl SparsityReport {
    pub fn from_trace(trace: &DecodeTrace, geometry: &ModelGeometry) -> Result<Self> {
        let n = geometry.total_q_heads();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for e in &trace.entries {
            let f = HeadId::new(e.layer, e.head).flat(geometry);
            sums[f] += e.tokens_selected as f64;
            counts[f] += 1;
        }
        let per_head_active = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
            .collect();
        let min_projected_mass = trace
            .entries
            .iter()
            .filter_map(|e| e.projected_mass)
            .reduce(f64::min);
        let true_masses: Vec<f64> = trace
            .entries
            .iter()
            .filter(|e| e.role == HeadRole::Retrieval)
            .filter_map(|e| e.true_mass)
            .collect();
        let positions: BTreeSet<u32> = trace.entries.iter().map(|e| e.position).collect();
        Ok(SparsityReport {
            compute_sparsity: compute_sparsity(&trace.entries)?,
            memory_sparsity: memory_sparsity(&trace.entries, geometry)?,
            per_head_active,
            decode_steps: positions.len(),
            min_projected_mass,
            mean_true_mass_retrieval: (!true_masses.is_empty())
                .then(|| true_masses.iter().sum::<f64>() / true_masses.len() as f64),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| crate::error::Error::Format(e.to_string()))
    }
}

/// Per-head token-count summary over a decode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub role: HeadRole,
    pub steps: usize,
    pub mean_active: f64,
    pub min_active: usize,
    pub max_active: usize,
    pub mean_visible: f64,
    pub mean_projected_mass: Option<f64>,
    pub mean_true_mass: Option<f64>,
}

fn mean_opt(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn head_summaries(trace: &DecodeTrace) -> Vec<HeadSummary> {
    let mut by_head: BTreeMap<(usize, usize), Vec<&DecodeTraceEntry>> = BTreeMap::new();
    for e in &trace.entries {
        by_head.entry((e.layer, e.head)).or_default().push(e);
    }
    by_head
        .into_iter()
        .map(|((layer, head), es)| {
            let n = es.len() as f64;
            let proj: Vec<f64> = es.iter().filter_map(|e| e.projected_mass).collect();
            let truth: Vec<f64> = es.iter().filter_map(|e| e.true_mass).collect();
            HeadSummary {
                layer,
                head,
                role: es[0].role,
                steps: es.len(),
                mean_active: es.iter().map(|e| e.tokens_selected as f64).sum::<f64>() / n,
                min_active: es.iter().map(|e| e.tokens_selected).min().unwrap_or(0),
                max_active: es.iter().map(|e| e.tokens_selected).max().unwrap_or(0),
                mean_visible: es.iter().map(|e| e.visible as f64).sum::<f64>() / n,
                mean_projected_mass: mean_opt(&proj),
                mean_true_mass: mean_opt(&truth),
            }
        })
        .collect()
}

/// One point of a mass-versus-budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    /// `top_k` or `top_p`.
    pub method: String,
    /// `k` for top-k, `p` for top-p.
    pub budget: f64,
    pub mean_tokens: f64,
    pub mean_mass: f64,
}

/// Dense-attention mass captured by static top-k budgets and by top-p, each
/// selecting on the head's exact scores, averaged over `positions`.
pub fn mass_budget_sweep(
    workload: &Workload,
    head: HeadId,
    positions: &[u32],
    ks: &[usize],
    p: f64,
) -> Result<Vec<BudgetPoint>> {
    if positions.is_empty() {
        return Err(arg_err!("sweep needs at least one position"));
    }
    let cache = workload.cache_for(head, workload.seq_len())?;
    let scale = workload.geometry.scale();
    let rows: Vec<AttentionRow> = positions
        .iter()
        .map(|pos| dense_attention(workload.query(head, *pos as usize), *pos, &cache, scale))
        .collect::<Result<_>>()?;
    // ln of the dense weights ranks tokens exactly like the scaled scores.
    let logits: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.weights.iter().map(|w| w.max(f64::MIN_POSITIVE).ln()).collect())
        .collect();
    let n = rows.len() as f64;
    let mut out = Vec::new();
    for &k in ks {
        let mut tokens = 0.0;
        let mut mass = 0.0;
        for (row, l) in rows.iter().zip(&logits) {
            let sel = top_k_static(l, k)?;
            tokens += sel.len() as f64;
            mass += sel.active_set.iter().map(|i| row.weights[*i]).sum::<f64>();
        }
        out.push(BudgetPoint {
            method: "top_k".into(),
            budget: k as f64,
            mean_tokens: tokens / n,
            mean_mass: mass / n,
        });
    }
    let mut tokens = 0.0;
    let mut mass = 0.0;
    for (row, l) in rows.iter().zip(&logits) {
        let sel = top_p_exact(l, p)?;
        tokens += sel.len() as f64;
        mass += sel.active_set.iter().map(|i| row.weights[*i]).sum::<f64>();
    }
    out.push(BudgetPoint {
        method: "top_p".into(),
        budget: p,
        mean_tokens: tokens / n,
        mean_mass: mass / n,
    });
    Ok(out)
}
