//! Token selection over relevance scores: exact top-p, static top-k, and the
//! sort-free block histogram approximation.

use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::numerics::{lse_reduce, softmax, LsePair};

/// Slack allowed when comparing a cumulative mass against `p`, so that
/// round-off in a sum that is mathematically equal to `p` does not pull in
/// an extra token.
pub const MASS_TOLERANCE: f64 = 1e-12;

pub const HISTOGRAM_BINS: usize = 256;

/// Width of the histogram score range below the global block maximum, in
/// natural-log units.
pub const HISTOGRAM_RANGE: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected token indices, ascending.
    pub active_set: Vec<usize>,
    /// One flag per block for block-level selectors; empty for token-level ones.
    pub block_mask: Vec<bool>,
    /// Softmax mass of the active set under the scores it was selected from.
    pub covered_mass: f64,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.active_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active_set.is_empty()
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(arg_err!("p must lie in (0, 1], got {p}"));
    }
    Ok(())
}

/// Indices sorted by descending score, ties toward the lower index.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order
}

fn finish(mut active: Vec<usize>, probs: &[f64]) -> SelectionResult {
    active.sort_unstable();
    let covered_mass = active.iter().map(|i| probs[*i]).sum::<f64>().min(1.0);
    SelectionResult {
        active_set: active,
        block_mask: Vec::new(),
        covered_mass,
    }
}

/// Smallest set of highest-scoring tokens whose softmax mass reaches `p`.
pub fn top_p_exact(scores: &[f64], p: f64) -> Result<SelectionResult> {
    check_p(p)?;
    let probs = softmax(scores)?;
    let order = descending_order(scores);
    let mut cum = 0.0;
    let mut take = order.len();
    // p = 1 keeps every token, including those whose mass underflows.
    for (i, t) in order.iter().enumerate().take_while(|_| p < 1.0) {
        cum += probs[*t];
        if cum >= p - MASS_TOLERANCE {
            take = i + 1;
            break;
        }
    }
    Ok(finish(order[..take].to_vec(), &probs))
}

/// The `min(k, n)` highest-scoring tokens.
pub fn top_k_static(scores: &[f64], k: usize) -> Result<SelectionResult> {
    if k < 1 {
        return Err(arg_err!("k must be at least 1"));
    }
    let probs = softmax(scores)?;
    let mut order = descending_order(scores);
    order.truncate(k);
    Ok(finish(order, &probs))
}

/// Log-sum-exp summary of one contiguous block of scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockStats {
    pub block_index: usize,
    /// First token index covered by the block.
    pub start: usize,
    pub len: usize,
    pub lse: LsePair,
}

impl BlockStats {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Block stats for `scores`, whose first element is token `offset`.
/// Block indices are numbered from `offset / block_size`.
pub fn block_partition_stats_at(scores: &[f64], block_size: usize, offset: usize) -> Result<Vec<BlockStats>> {
    if block_size < 1 {
        return Err(arg_err!("block_size must be at least 1"));
    }
    if scores.is_empty() {
        return Err(arg_err!("cannot partition an empty score vector"));
    }
    scores
        .chunks(block_size)
        .enumerate()
        .map(|(i, chunk)| {
            Ok(BlockStats {
                block_index: offset / block_size + i,
                start: offset + i * block_size,
                len: chunk.len(),
                lse: lse_reduce(chunk)?,
            })
        })
        .collect()
}

pub fn block_partition_stats(scores: &[f64], block_size: usize) -> Result<Vec<BlockStats>> {
    block_partition_stats_at(scores, block_size, 0)
}

/// Concatenate per-split block lists covering consecutive KV ranges and
/// renumber blocks globally.
pub fn split_merge(partials: &[Vec<BlockStats>]) -> Result<Vec<BlockStats>> {
    if partials.is_empty() {
        return Err(arg_err!("split_merge needs at least one split"));
    }
    let mut out: Vec<BlockStats> = Vec::with_capacity(partials.iter().map(Vec::len).sum());
    for (s, split) in partials.iter().enumerate() {
        for b in split {
            if let Some(prev) = out.last() {
                if b.start != prev.end() {
                    return Err(arg_err!(
                        "split {s}: block at token {} does not continue the range ending at {}",
                        b.start,
                        prev.end()
                    ));
                }
            }
            if b.len == 0 {
                return Err(arg_err!("split {s} contains an empty block"));
            }
            out.push(BlockStats {
                block_index: out.len(),
                ..*b
            });
        }
    }
    if out.is_empty() {
        return Err(arg_err!("all splits are empty"));
    }
    Ok(out)
}

/// Block stats computed over `n_splits` block-aligned KV ranges in parallel
/// and merged. Equal to [`block_partition_stats`] on the whole vector.
pub fn split_block_stats(scores: &[f64], block_size: usize, n_splits: usize) -> Result<Vec<BlockStats>> {
    if block_size < 1 || n_splits < 1 {
        return Err(arg_err!("block_size and n_splits must be at least 1"));
    }
    let n_blocks = scores.len().div_ceil(block_size);
    let per_split = n_blocks.div_ceil(n_splits).max(1) * block_size;
    let partials: Vec<Vec<BlockStats>> = scores
        .par_chunks(per_split.max(1))
        .enumerate()
        .map(|(i, chunk)| block_partition_stats_at(chunk, block_size, i * per_split))
        .collect::<Result<_>>()?;
    split_merge(&partials)
}

/// 256-bin histogram of block masses over `[m* - 32, m*]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSketch {
    pub bins: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub bin_width: f64,
}

impl HistogramSketch {
    /// Two passes: the global block maximum, then a deposit of each block's
    /// mass `l_b * exp(m_b - m*)` into the bin of `m_b`.
    pub fn from_blocks(blocks: &[BlockStats]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(arg_err!("histogram over an empty block list"));
        }
        let hi = blocks.iter().map(|b| b.lse.m).fold(f64::NEG_INFINITY, f64::max);
        if !hi.is_finite() {
            return Err(Error::Numeric("non-finite block maximum".into()));
        }
        let lo = hi - HISTOGRAM_RANGE;
        let mut sketch = HistogramSketch {
            bins: vec![0.0; HISTOGRAM_BINS],
            lo,
            hi,
            bin_width: (hi - lo) / HISTOGRAM_BINS as f64,
        };
        for b in blocks {
            let i = sketch.bin_of(b.lse.m);
            sketch.bins[i] += b.lse.mass_relative_to(hi);
        }
        Ok(sketch)
    }

    pub fn bin_of(&self, score: f64) -> usize {
        let raw = ((score - self.lo) / self.bin_width).floor();
        raw.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    /// Highest bin at which the cumulative mass scanned from the top reaches
    /// `p` of the total. Falls back to bin 0 if round-off keeps the scan short.
    pub fn threshold_bin(&self, p: f64) -> usize {
        let target = p * self.total();
        let mut cum = 0.0;
        for i in (0..HISTOGRAM_BINS).rev() {
            cum += self.bins[i];
            if cum >= target * (1.0 - MASS_TOLERANCE) {
                return i;
            }
        }
        0
    }
}

/// Bin-free reference for the histogram scan: blocks ordered by their
/// maximum score (ties toward the lower index), kept until their mass
/// reaches `p` of the total.
pub fn block_top_p_exact(blocks: &[BlockStats], p: f64) -> Result<SelectionResult> {
    check_p(p)?;
    if blocks.is_empty() {
        return Err(arg_err!("block top-p over an empty block list"));
    }
    let maxima: Vec<f64> = blocks.iter().map(|b| b.lse.m).collect();
    let hi = maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let masses: Vec<f64> = blocks.iter().map(|b| b.lse.mass_relative_to(hi)).collect();
    let total: f64 = masses.iter().sum();
    let mut block_mask = vec![false; blocks.len()];
    let mut selected = 0.0;
    for i in descending_order(&maxima) {
        block_mask[i] = true;
        selected += masses[i];
        if p < 1.0 && selected >= p * total * (1.0 - MASS_TOLERANCE) {
            break;
        }
    }
    let active_set = blocks
        .iter()
        .zip(&block_mask)
        .filter(|(_, m)| **m)
        .flat_map(|(b, _)| b.start..b.end())
        .collect();
    Ok(SelectionResult {
        active_set,
        block_mask,
        covered_mass: (selected / total).min(1.0),
    })
}

/// Block-level top-p via the histogram. Every block in the threshold bin or
/// above is kept, so coverage is at least `p`.
pub fn histogram_threshold(blocks: &[BlockStats], p: f64) -> Result<SelectionResult> {
    check_p(p)?;
    let sketch = HistogramSketch::from_blocks(blocks)?;
    let threshold = if p < 1.0 { sketch.threshold_bin(p) } else { 0 };
    let block_mask: Vec<bool> = blocks.iter().map(|b| sketch.bin_of(b.lse.m) >= threshold).collect();
    let mut active_set = Vec::new();
    let mut selected = 0.0;
    let mut total = 0.0;
    for (b, keep) in blocks.iter().zip(&block_mask) {
        let mass = b.lse.mass_relative_to(sketch.hi);
        total += mass;
        if *keep {
            selected += mass;
            active_set.extend(b.start..b.end());
        }
    }
    if active_set.is_empty() {
        return Err(Error::Internal("histogram selected no block".into()));
    }
    Ok(SelectionResult {
        active_set,
        block_mask,
        covered_mass: (selected / total).min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::lse_merge;
    use proptest::prelude::*;

    fn three() -> Vec<f64> {
        vec![5f64.ln(), 3f64.ln(), 2f64.ln()]
    }

    #[test]
    fn top_p_examples() {
        let r = top_p_exact(&three(), 0.5).unwrap();
        assert_eq!(r.active_set, vec![0]);
        assert!((r.covered_mass - 0.5).abs() < 1e-12);
        let r = top_p_exact(&three(), 0.85).unwrap();
        assert_eq!(r.active_set, vec![0, 1, 2]);
        let r = top_p_exact(&[0.1, -3.0, 2.0, 0.5], 1.0).unwrap();
        assert_eq!(r.active_set, vec![0, 1, 2, 3]);
        assert!(top_p_exact(&three(), 0.0).is_err());
        assert!(top_p_exact(&three(), 1.5).is_err());
        assert!(top_p_exact(&[], 0.5).is_err());
    }

    #[test]
    fn full_mass_keeps_underflowing_tokens() {
        let scores = [0.0, -2000.0, 5.0, -900.0];
        assert_eq!(top_p_exact(&scores, 1.0).unwrap().active_set, vec![0, 1, 2, 3]);
        let blocks = block_partition_stats(&scores, 1).unwrap();
        assert_eq!(histogram_threshold(&blocks, 1.0).unwrap().active_set, vec![0, 1, 2, 3]);
        assert_eq!(block_top_p_exact(&blocks, 1.0).unwrap().active_set, vec![0, 1, 2, 3]);
    }

    #[test]
    fn top_p_ties_prefer_lower_index() {
        let r = top_p_exact(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(r.active_set, vec![0, 1]);
    }

    #[test]
    fn top_k_examples() {
        let r = top_k_static(&three(), 5).unwrap();
        assert_eq!(r.active_set, vec![0, 1, 2]);
        assert!((r.covered_mass - 1.0).abs() < 1e-12);
        let r = top_k_static(&three(), 2).unwrap();
        assert_eq!(r.active_set, vec![0, 1]);
        assert!((r.covered_mass - 0.8).abs() < 1e-12);
        let r = top_k_static(&[4.0, 3.0, 2.0, 1.0], 1).unwrap();
        assert_eq!(r.active_set, vec![0]);
        assert!(top_k_static(&three(), 0).is_err());
    }

    #[test]
    fn partition_examples() {
        let s: Vec<f64> = (0..130).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let one = block_partition_stats(&s[..64], 64).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].lse, lse_reduce(&s[..64]).unwrap());
        let blocks = block_partition_stats(&s, 64).unwrap();
        assert_eq!(blocks.iter().map(|b| b.len).collect::<Vec<_>>(), vec![64, 64, 2]);
        assert_eq!(blocks.iter().map(|b| b.start).collect::<Vec<_>>(), vec![0, 64, 128]);
        let merged = lse_merge(&blocks.iter().map(|b| b.lse).collect::<Vec<_>>()).unwrap();
        let whole = lse_reduce(&s).unwrap();
        assert!((merged.log_mass() - whole.log_mass()).abs() < 1e-10);
        assert!(block_partition_stats(&[], 64).is_err());
        assert!(block_partition_stats(&s, 0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let single = block_partition_stats(&[0.3, 0.1, -1.0], 64).unwrap();
        let r = histogram_threshold(&single, 0.9).unwrap();
        assert_eq!(r.block_mask, vec![true]);
        assert_eq!(r.active_set, vec![0, 1, 2]);
        assert!((r.covered_mass - 1.0).abs() < 1e-12);

        // Heavy block at m = 0 holding 0.95 of the mass, light block one
        // full bin-width * 8 lower.
        let w = HISTOGRAM_RANGE / HISTOGRAM_BINS as f64;
        let light_m = -8.0 * w;
        let blocks = vec![
            BlockStats {
                block_index: 0,
                start: 0,
                len: 4,
                lse: LsePair { m: 0.0, l: 0.95 },
            },
            BlockStats {
                block_index: 1,
                start: 4,
                len: 4,
                lse: LsePair {
                    m: light_m,
                    l: 0.05 / light_m.exp(),
                },
            },
        ];
        let r = histogram_threshold(&blocks, 0.9).unwrap();
        assert_eq!(r.block_mask, vec![true, false]);
        assert_eq!(r.active_set, vec![0, 1, 2, 3]);
        assert!((r.covered_mass - 0.95).abs() < 1e-12);

        // All maxima in one bin.
        let same: Vec<f64> = (0..256).map(|i| if i % 64 == 0 { 1.0 } else { -2.0 - (i % 7) as f64 }).collect();
        let blocks = block_partition_stats(&same, 64).unwrap();
        for p in [0.1, 0.5, 0.99] {
            assert_eq!(histogram_threshold(&blocks, p).unwrap().block_mask, vec![true; 4]);
        }
        assert!(histogram_threshold(&[], 0.5).is_err());
        assert!(histogram_threshold(&blocks, 0.0).is_err());
    }

    #[test]
    fn histogram_bin_mapping_clamps() {
        let blocks = block_partition_stats(&[0.0, -100.0], 1).unwrap();
        let sk = HistogramSketch::from_blocks(&blocks).unwrap();
        assert_eq!(sk.bin_of(0.0), 255);
        assert_eq!(sk.bin_of(-100.0), 0);
        assert_eq!(sk.bin_of(-32.0), 0);
        assert_eq!(sk.bin_of(-31.9), 0);
        assert_eq!(sk.bin_of(-31.8), 1);
    }

    #[test]
    fn split_examples() {
        let s: Vec<f64> = (0..256).map(|i| ((i * 31 % 17) as f64) * 0.3).collect();
        let whole = block_partition_stats(&s, 64).unwrap();
        assert_eq!(split_merge(&[whole.clone()]).unwrap(), whole);
        let a = block_partition_stats_at(&s[..128], 64, 0).unwrap();
        let b = block_partition_stats_at(&s[128..], 64, 128).unwrap();
        assert_eq!(split_merge(&[a.clone(), b.clone()]).unwrap(), whole);
        assert!(split_merge(&[b.clone(), a.clone()]).is_err());
        assert!(split_merge(&[a.clone(), a]).is_err());
        assert!(split_merge(&[]).is_err());
        for n in 1..6 {
            assert_eq!(split_block_stats(&s, 64, n).unwrap(), whole);
        }
    }

    fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 1..600)
    }

    proptest! {
        #[test]
        fn histogram_covers_p(scores in scores_strategy(), bs in 1usize..80, pi in 0usize..3) {
            let p = [0.5, 0.9, 0.99][pi];
            let blocks = block_partition_stats(&scores, bs).unwrap();
            let r = histogram_threshold(&blocks, p).unwrap();
            prop_assert!(r.covered_mass >= p - 1e-9);
            // Exact recomputation from the tokens themselves.
            let probs = softmax(&scores).unwrap();
            let direct: f64 = r.active_set.iter().map(|i| probs[*i]).sum();
            prop_assert!((direct - r.covered_mass).abs() < 1e-9);
        }

        #[test]
        fn histogram_overshoot_is_bounded(scores in scores_strategy(), bs in 1usize..80, p in 0.05f64..1.0) {
            let blocks = block_partition_stats(&scores, bs).unwrap();
            let r = histogram_threshold(&blocks, p).unwrap();
            let selected = r.block_mask.iter().filter(|m| **m).count();
            let exact = block_top_p_exact(&blocks, p).unwrap();
            prop_assert!(exact.covered_mass >= p - 1e-9);
            let exact_blocks = exact.block_mask.iter().filter(|m| **m).count();
            let sketch = HistogramSketch::from_blocks(&blocks).unwrap();
            let t = sketch.threshold_bin(p);
            let in_bin = blocks.iter().filter(|b| sketch.bin_of(b.lse.m) == t).count();
            prop_assert!(selected <= exact_blocks + in_bin);
        }

        #[test]
        fn top_p_is_minimal(scores in scores_strategy(), p in 0.05f64..1.0) {
            let r = top_p_exact(&scores, p).unwrap();
            prop_assert!(r.covered_mass >= p - 1e-9);
            let probs = softmax(&scores).unwrap();
            let smallest = r.active_set.iter().map(|i| probs[*i]).fold(f64::INFINITY, f64::min);
            prop_assert!(r.covered_mass - smallest < p);
        }

        #[test]
        fn top_k_mass_monotone(scores in scores_strategy(), k in 1usize..300) {
            let a = top_k_static(&scores, k).unwrap();
            let b = top_k_static(&scores, k + 1).unwrap();
            prop_assert!(b.covered_mass >= a.covered_mass - 1e-12);
        }

        #[test]
        fn selection_ignores_constant_shift(scores in scores_strategy(), c in -50.0f64..50.0, p in 0.05f64..1.0) {
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            prop_assert_eq!(top_k_static(&scores, 7).unwrap().active_set, top_k_static(&shifted, 7).unwrap().active_set);
            let a = top_p_exact(&scores, p).unwrap();
            let b = top_p_exact(&shifted, p).unwrap();
            // Shifting perturbs probabilities by round-off only.
            prop_assert!((a.len() as i64 - b.len() as i64).abs() <= 1);
        }

        #[test]
        fn split_matches_unsplit(scores in scores_strategy(), bs in 1usize..80, n in 1usize..8) {
            prop_assert_eq!(split_block_stats(&scores, bs, n).unwrap(), block_partition_stats(&scores, bs).unwrap());
        }
    }
}
