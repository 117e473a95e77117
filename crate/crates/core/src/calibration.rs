//! Offline head calibration: plant an identical span at the start and end of
//! a document, measure how much attention each head sends from the later copy
//! to the earlier one, and keep the top-scoring heads as retrieval heads.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::seed::SeedTree;
use crate::workload::{
    background_content, dense_attention, needle_content, AttentionRow, HeadId, HeadRole,
    ModelGeometry, SyntheticModel, TokenEmbeddings,
};

/// Positions of the two copies of the needle in a calibration sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleLayout {
    pub n_pre: Vec<usize>,
    pub n_post: Vec<usize>,
    pub total_len: usize,
}

impl NeedleLayout {
    pub fn validate(&self) -> Result<()> {
        let (Some(pre_max), Some(post_min)) = (self.n_pre.iter().max(), self.n_post.iter().min()) else {
            return Err(arg_err!("needle index sets must be non-empty"));
        };
        if pre_max >= post_min {
            return Err(arg_err!("earlier needle must end before the later one starts"));
        }
        if self.n_post.iter().any(|t| *t >= self.total_len) {
            return Err(arg_err!("needle index beyond total length {}", self.total_len));
        }
        Ok(())
    }
}

/// Place `needle` over the first tokens of `document` and append it again
/// after the document's end.
pub fn build_calibration_sequence(
    document: &TokenEmbeddings,
    needle: &TokenEmbeddings,
) -> Result<(TokenEmbeddings, NeedleLayout)> {
    if document.dim != needle.dim {
        return Err(arg_err!("document and needle embeddings differ in width"));
    }
    let (nl, dl) = (needle.len(), document.len());
    if nl == 0 {
        return Err(arg_err!("needle must hold at least one token"));
    }
    if dl < 2 * nl {
        return Err(arg_err!(
            "needle of {nl} tokens is longer than half the {dl}-token document"
        ));
    }
    let mut seq = document.clone();
    seq.data[..needle.data.len()].copy_from_slice(&needle.data);
    seq.extend(needle);
    let layout = NeedleLayout {
        n_pre: (0..nl).collect(),
        n_post: (dl..dl + nl).collect(),
        total_len: dl + nl,
    };
    layout.validate()?;
    Ok((seq, layout))
}

/// Mean attention mass the later needle sends to the earlier one.
///
/// Row weights are indexed by token position (caches built from position 0).
pub fn retrieval_score(rows: &[AttentionRow], layout: &NeedleLayout) -> Result<f64> {
    layout.validate()?;
    let mut total = 0.0;
    for &t in &layout.n_post {
        let row = rows
            .iter()
            .find(|r| r.query_position as usize == t)
            .ok_or_else(|| arg_err!("no attention row for needle position {t}"))?;
        total += layout
            .n_pre
            .iter()
            .filter_map(|j| row.weights.get(*j))
            .sum::<f64>();
    }
    Ok((total / layout.n_post.len() as f64).clamp(0.0, 1.0))
}

/// `round(ratio * n)` with halves rounded up.
pub fn retrieval_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 0.5 + 1e-9).floor() as usize
}

/// Split of query heads into retrieval and local sets, by flat head index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPartition {
    pub scores: Vec<f64>,
    pub retrieval_set: Vec<usize>,
    pub local_set: Vec<usize>,
    pub ratio: f64,
}

impl HeadPartition {
    pub fn is_retrieval(&self, flat: usize) -> bool {
        self.retrieval_set.binary_search(&flat).is_ok()
    }

    pub fn role(&self, flat: usize) -> HeadRole {
        if self.is_retrieval(flat) {
            HeadRole::Retrieval
        } else {
            HeadRole::Local
        }
    }

    /// Every head retrieval: the engine then degenerates to dense decoding
    /// (with `p = 1`).
    pub fn all_retrieval(n: usize) -> Self {
        HeadPartition {
            scores: vec![1.0; n],
            retrieval_set: (0..n).collect(),
            local_set: Vec::new(),
            ratio: 1.0,
        }
    }

    pub fn from_roles(roles: &[HeadRole]) -> Self {
        let retrieval_set: Vec<usize> = (0..roles.len()).filter(|i| roles[*i] == HeadRole::Retrieval).collect();
        let local_set = (0..roles.len()).filter(|i| roles[*i] == HeadRole::Local).collect();
        HeadPartition {
            scores: roles.iter().map(|r| if *r == HeadRole::Retrieval { 1.0 } else { 0.0 }).collect(),
            ratio: retrieval_set.len() as f64 / roles.len().max(1) as f64,
            retrieval_set,
            local_set,
        }
    }
}

/// Keep the `round(ratio * n)` highest-scoring heads; ties go to the lower index.
pub fn partition_heads(scores: &[f64], ratio: f64) -> Result<HeadPartition> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(arg_err!("ratio must lie in (0, 1], got {ratio}"));
    }
    if scores.is_empty() {
        return Err(arg_err!("no head scores to partition"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN head score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    let k = retrieval_count(scores.len(), ratio).min(scores.len());
    let mut retrieval_set = order[..k].to_vec();
    let mut local_set = order[k..].to_vec();
    retrieval_set.sort_unstable();
    local_set.sort_unstable();
    Ok(HeadPartition {
        scores: scores.to_vec(),
        retrieval_set,
        local_set,
        ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub doc_len: usize,
    pub needle_len: usize,
    /// Independent calibration sequences whose scores are averaged.
    pub n_sequences: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            doc_len: 2048,
            needle_len: 16,
            n_sequences: 1,
        }
    }
}

/// Scores of every `(layer, head)` unit on one or more calibration sequences.
pub fn calibrate(model: &SyntheticModel, config: &CalibrationConfig, seed: SeedTree) -> Result<HeadPartition> {
    if config.n_sequences == 0 {
        return Err(arg_err!("n_sequences must be positive"));
    }
    let g = &model.geometry;
    let total = g.total_q_heads();
    let mut sums = vec![0.0; total];
    for s in 0..config.n_sequences {
        let mut rng = seed.index(s as u64).rng();
        let cd = model.signal.content_dim;
        let doc = background_content(config.doc_len, cd, model.signal.background_scale, &mut rng);
        let needle = needle_content(config.needle_len, cd, &mut rng);
        let (seq, layout) = build_calibration_sequence(&doc, &needle)?;
        let scores = score_heads(model, &seq, &layout)?;
        for (acc, v) in sums.iter_mut().zip(scores) {
            *acc += v;
        }
    }
    let scores: Vec<f64> = sums.iter().map(|s| s / config.n_sequences as f64).collect();
    partition_heads(&scores, g.retrieval_ratio)
}

/// Dense rows for the later needle on every head, reduced to retrieval scores.
pub fn score_heads(model: &SyntheticModel, seq: &TokenEmbeddings, layout: &NeedleLayout) -> Result<Vec<f64>> {
    let g = &model.geometry;
    let acts = model.run(seq, seq)?;
    let workload_like = |head: HeadId| -> Result<f64> {
        let kv = head.layer * g.n_kv_heads + g.qhead_to_kvhead(head.head)?;
        let d = g.head_dim;
        let positions: Vec<u32> = (0..acts.seq_len as u32).collect();
        let cache = crate::workload::KVCacheHead::from_rows(g.rope()?, &acts.keys[kv], &acts.values[kv], &positions)?;
        let q = &acts.queries[head.flat(g)];
        let rows = layout
            .n_post
            .iter()
            .map(|&t| dense_attention(&q[t * d..(t + 1) * d], t as u32, &cache, g.scale()))
            .collect::<Result<Vec<_>>>()?;
        retrieval_score(&rows, layout)
    };
    (0..g.total_q_heads())
        .into_par_iter()
        .map(|f| workload_like(HeadId::from_flat(f, g)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionEntry {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
    pub role: HeadRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionFile {
    ratio: f64,
    n_layers: usize,
    n_q_heads: usize,
    heads: Vec<PartitionEntry>,
}

/// Partition as `(layer, head, score, role)` entries.
pub fn partition_entries(partition: &HeadPartition, geometry: &ModelGeometry) -> Vec<PartitionEntry> {
    partition
        .scores
        .iter()
        .enumerate()
        .map(|(f, score)| {
            let h = HeadId::from_flat(f, geometry);
            PartitionEntry {
                layer: h.layer,
                head: h.head,
                score: *score,
                role: partition.role(f),
            }
        })
        .collect()
}

pub fn partition_to_toml(partition: &HeadPartition, geometry: &ModelGeometry) -> Result<String> {
    let file = PartitionFile {
        ratio: partition.ratio,
        n_layers: geometry.n_layers,
        n_q_heads: geometry.n_q_heads,
        heads: partition_entries(partition, geometry),
    };
    toml::to_string(&file).map_err(|e| Error::Format(format!("partition encode: {e}")))
}

pub fn partition_from_toml(text: &str, geometry: &ModelGeometry) -> Result<HeadPartition> {
    let file: PartitionFile = toml::from_str(text).map_err(|e| Error::Format(format!("partition: {e}")))?;
    if file.n_layers != geometry.n_layers || file.n_q_heads != geometry.n_q_heads {
        return Err(Error::Format(format!(
            "partition is for {}x{} heads, geometry has {}x{}",
            file.n_layers, file.n_q_heads, geometry.n_layers, geometry.n_q_heads
        )));
    }
    let total = geometry.total_q_heads();
    let mut scores = vec![f64::NAN; total];
    let mut roles = vec![HeadRole::Local; total];
    for e in &file.heads {
        if e.layer >= geometry.n_layers || e.head >= geometry.n_q_heads {
            return Err(Error::Format(format!("partition entry L{}H{} out of range", e.layer, e.head)));
        }
        let f = HeadId::new(e.layer, e.head).flat(geometry);
        scores[f] = e.score;
        roles[f] = e.role;
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Format("partition does not cover every head".into()));
    }
    Ok(HeadPartition {
        scores,
        retrieval_set: (0..total).filter(|f| roles[*f] == HeadRole::Retrieval).collect(),
        local_set: (0..total).filter(|f| roles[*f] == HeadRole::Local).collect(),
        ratio: file.ratio,
    })
}

pub fn save_partition(path: &Path, partition: &HeadPartition, geometry: &ModelGeometry) -> Result<()> {
    let text = partition_to_toml(partition, geometry)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_partition(path: &Path, geometry: &ModelGeometry) -> Result<HeadPartition> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    partition_from_toml(&text, geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_rows(len: usize, positions: &[usize]) -> Vec<AttentionRow> {
        positions
            .iter()
            .map(|&t| AttentionRow {
                query_position: t as u32,
                weights: vec![1.0 / (t + 1) as f64; t + 1],
                output: vec![],
            })
            .filter(|r| (r.query_position as usize) < len)
            .collect()
    }

    #[test]
    fn sequence_layout_arithmetic() {
        let doc = TokenEmbeddings { dim: 2, data: vec![0.5; 200] };
        let needle = TokenEmbeddings { dim: 2, data: vec![1.0; 10] };
        let (seq, layout) = build_calibration_sequence(&doc, &needle).unwrap();
        assert_eq!(layout.n_pre, (0..5).collect::<Vec<_>>());
        assert_eq!(layout.n_post, (100..105).collect::<Vec<_>>());
        assert_eq!(layout.total_len, 105);
        assert_eq!(seq.len(), 105);
        assert_eq!(seq.row(0), seq.row(100));
        assert_eq!(seq.row(4), seq.row(104));

        let one = TokenEmbeddings { dim: 2, data: vec![1.0; 2] };
        let (_, layout) = build_calibration_sequence(&doc, &one).unwrap();
        assert_eq!(layout.n_pre, vec![0]);
        assert_eq!(layout.n_post, vec![100]);

        let long = TokenEmbeddings { dim: 2, data: vec![1.0; 2 * 51] };
        assert!(build_calibration_sequence(&doc, &long).is_err());
    }

    #[test]
    fn score_examples() {
        let layout = NeedleLayout { n_pre: vec![0, 1], n_post: vec![6, 7], total_len: 8 };
        let r = retrieval_score(&uniform_rows(8, &[6, 7]), &layout).unwrap();
        assert!((r - (2.0 / 7.0 + 2.0 / 8.0) / 2.0).abs() < 1e-12);
        assert!((r - 0.2679).abs() < 1e-4);

        let full: Vec<AttentionRow> = [6u32, 7]
            .iter()
            .map(|&t| {
                let mut w = vec![0.0; t as usize + 1];
                w[0] = 0.5;
                w[1] = 0.5;
                AttentionRow { query_position: t, weights: w, output: vec![] }
            })
            .collect();
        assert_eq!(retrieval_score(&full, &layout).unwrap(), 1.0);

        let none: Vec<AttentionRow> = [6u32, 7]
            .iter()
            .map(|&t| {
                let mut w = vec![0.0; t as usize + 1];
                w[t as usize] = 1.0;
                AttentionRow { query_position: t, weights: w, output: vec![] }
            })
            .collect();
        assert_eq!(retrieval_score(&none, &layout).unwrap(), 0.0);

        assert!(retrieval_score(&uniform_rows(8, &[6]), &layout).is_err());
    }

    #[test]
    fn partition_examples() {
        let p = partition_heads(&[0.9, 0.1, 0.2, 0.05], 0.25).unwrap();
        assert_eq!(p.retrieval_set, vec![0]);
        assert_eq!(p.local_set, vec![1, 2, 3]);
        let p = partition_heads(&[0.9, 0.1, 0.2, 0.05], 1.0).unwrap();
        assert_eq!(p.retrieval_set, vec![0, 1, 2, 3]);
        let p = partition_heads(&[0.3; 4], 0.5).unwrap();
        assert_eq!(p.retrieval_set, vec![0, 1]);
        assert!(partition_heads(&[0.1], 0.0).is_err());
        assert!(partition_heads(&[0.1], 1.5).is_err());
        assert!(partition_heads(&[], 0.5).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(retrieval_count(32, 0.15), 5);
        assert_eq!(retrieval_count(10, 0.15), 2);
        assert_eq!(retrieval_count(10, 0.35), 4);
        assert_eq!(retrieval_count(1536, 0.15), 230);
        assert_eq!(retrieval_count(4, 0.1), 0);
    }

    #[test]
    fn toml_round_trip() {
        let g = ModelGeometry::new(2, 4, 2, 8);
        let p = partition_heads(&[0.1, 0.7, 0.3, 0.2, 0.9, 0.0, 0.5, 0.25], 0.25).unwrap();
        let text = partition_to_toml(&p, &g).unwrap();
        let back = partition_from_toml(&text, &g).unwrap();
        assert_eq!(back, p);
        assert!(partition_from_toml(&text, &ModelGeometry::new(1, 4, 2, 8)).is_err());
    }

    proptest! {
        #[test]
        fn partition_depends_on_ranks_only(scores in prop::collection::vec(0.0f64..1.0, 1..40), ratio in 0.01f64..1.0) {
            let p = partition_heads(&scores, ratio).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect();
            let q = partition_heads(&transformed, ratio).unwrap();
            prop_assert_eq!(&p.retrieval_set, &q.retrieval_set);
            prop_assert_eq!(p.retrieval_set.len(), retrieval_count(scores.len(), ratio));
            let min_ret = p.retrieval_set.iter().map(|i| scores[*i]).fold(f64::INFINITY, f64::min);
            let max_loc = p.local_set.iter().map(|i| scores[*i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.retrieval_set.is_empty() || p.local_set.is_empty() || min_ret >= max_loc);
        }

        #[test]
        fn score_monotone_under_mass_transfer(raw in prop::collection::vec(0.01f64..1.0, 10), frac in 0.0f64..1.0) {
            // 10 visible tokens, pre = {0,1}, post = {9}
            let layout = NeedleLayout { n_pre: vec![0, 1], n_post: vec![9], total_len: 10 };
            let z: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / z).collect();
            let before = retrieval_score(&[AttentionRow { query_position: 9, weights: w.clone(), output: vec![] }], &layout).unwrap();
            let mut moved = w.clone();
            let take = moved[5] * frac;
            moved[5] -= take;
            moved[0] += take;
            let after = retrieval_score(&[AttentionRow { query_position: 9, weights: moved, output: vec![] }], &layout).unwrap();
            prop_assert!(after >= before - 1e-15);
            prop_assert!((0.0..=1.0).contains(&after));
        }
    }
}
