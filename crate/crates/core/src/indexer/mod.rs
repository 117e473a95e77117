//! Low-rank relevance scoring on pre-RoPE features and its KL training.
//!
//! A retrieval head owns two `r x d` matrices. The score of cached token `n`
//! for query `q` is `(W_q q) . (W_k k_n)`, computed on vectors *before* the
//! rotary embedding so that relevance is independent of distance.

mod data;
mod train;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::numerics::{dot_mixed, kl_to_logits, softmax};
use crate::seed::SeedTree;
use crate::tensorfile::{Tensor, TensorBundle};
use crate::workload::KVCacheHead;

pub use data::{planted_bilinear_dataset, rows_from_workload, PlantedTeacher, PlantedTeacherConfig};
pub use train::{lr_at, train_projector, AdamW, Stage1Config, TrainOutcome};

/// Per-head query/key projections, row-major `r x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub r: usize,
    pub d: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    /// Multiplier on projected scores. Trained projectors keep 1.0; the
    /// knob exists for hand-built projectors whose scale is arbitrary.
    pub score_scale: f64,
}

impl Projector {
    pub fn zeros(r: usize, d: usize) -> Self {
        Projector {
            r,
            d,
            w_q: vec![0.0; r * d],
            w_k: vec![0.0; r * d],
            score_scale: 1.0,
        }
    }

    /// `W_q = W_k = I`; requires `r == d`.
    pub fn identity(d: usize) -> Self {
        let mut p = Projector::zeros(d, d);
        for i in 0..d {
            p.w_q[i * d + i] = 1.0;
            p.w_k[i * d + i] = 1.0;
        }
        p
    }

    /// Gaussian entries with standard deviation `1/sqrt(d)`.
    pub fn gaussian(r: usize, d: usize, seed: SeedTree) -> Self {
        let mut rng = seed.rng();
        let std = 1.0 / (d as f64).sqrt();
        let mut draw = || -> Vec<f64> {
            (0..r * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect()
        };
        let w_q = draw();
        let w_k = draw();
        Projector {
            r,
            d,
            w_q,
            w_k,
            score_scale: 1.0,
        }
    }

    /// Select a fixed set of coordinates (both sides), e.g. a known subspace.
    pub fn coordinate_selector(d: usize, dims: &[usize]) -> Result<Self> {
        if dims.iter().any(|i| *i >= d) {
            return Err(arg_err!("selector coordinate out of range for d = {d}"));
        }
        let mut p = Projector::zeros(dims.len(), d);
        for (row, col) in dims.iter().enumerate() {
            p.w_q[row * d + col] = 1.0;
            p.w_k[row * d + col] = 1.0;
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        2 * self.r * self.d
    }

    /// Round every weight to `f32`, the persisted precision.
    pub fn rounded(mut self) -> Self {
        for w in self.w_q.iter_mut().chain(self.w_k.iter_mut()) {
            *w = *w as f32 as f64;
        }
        self
    }

    fn check(&self) -> Result<()> {
        if self.w_q.len() != self.r * self.d || self.w_k.len() != self.r * self.d {
            return Err(arg_err!("projector matrices do not match r x d = {} x {}", self.r, self.d));
        }
        if self.w_q.iter().chain(&self.w_k).any(|w| !w.is_finite()) {
            return Err(Error::Numeric("projector has non-finite weights".into()));
        }
        Ok(())
    }

    /// `W x` for an `f32` input vector.
    pub fn project(w: &[f64], r: usize, x: &[f32]) -> Vec<f64> {
        let d = x.len();
        (0..r).map(|i| dot_mixed(&w[i * d..(i + 1) * d], x)).collect()
    }

    pub fn project_query(&self, q: &[f32]) -> Vec<f64> {
        Self::project(&self.w_q, self.r, q)
    }

    pub fn project_key(&self, k: &[f32]) -> Vec<f64> {
        Self::project(&self.w_k, self.r, k)
    }

    /// Projected keys for every row of `cache`, row-major `len x r`.
    pub fn project_cache(&self, cache: &KVCacheHead) -> Vec<f32> {
        let mut out = Vec::with_capacity(cache.len() * self.r);
        for t in 0..cache.len() {
            out.extend(self.project_key(cache.key_pre(t)).iter().map(|x| *x as f32));
        }
        out
    }
}

/// Projected relevance of every cached token visible from `query_position`.
pub fn projected_scores(
    query_pre: &[f32],
    query_position: u32,
    cache: &KVCacheHead,
    projector: &Projector,
) -> Result<Vec<f64>> {
    projector.check()?;
    if query_pre.len() != projector.d || cache.head_dim() != projector.d {
        return Err(arg_err!(
            "projector expects dimension {}, query has {} and cache {}",
            projector.d,
            query_pre.len(),
            cache.head_dim()
        ));
    }
    let a: Vec<f64> = projector
        .project_query(query_pre)
        .iter()
        .map(|x| x * projector.score_scale)
        .collect();
    let visible = cache.visible_len(query_position);
    Ok((0..visible)
        .map(|t| {
            let b = projector.project_key(cache.key_pre(t));
            a.iter().zip(&b).map(|(x, y)| x * y).sum()
        })
        .collect())
}

/// Fraction of `reference_top` present in `selected`.
pub fn index_recall(selected: &[usize], reference_top: &[usize]) -> Result<f64> {
    if reference_top.is_empty() {
        return Err(arg_err!("recall against an empty reference set"));
    }
    let sel: HashSet<usize> = selected.iter().copied().collect();
    let reference: HashSet<usize> = reference_top.iter().copied().collect();
    Ok(reference.intersection(&sel).count() as f64 / reference.len() as f64)
}

/// `KL(full_attn || softmax(proj_scores))`.
pub fn projector_loss(full_attn: &[f64], proj_scores: &[f64]) -> Result<f64> {
    if full_attn.len() != proj_scores.len() {
        return Err(arg_err!(
            "attention row has {} entries, projected scores {}",
            full_attn.len(),
            proj_scores.len()
        ));
    }
    kl_to_logits(full_attn, proj_scores)
}

/// One training example: a query, its exact attention row, and the cache
/// (by index into the dataset) it attends over.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub cache: usize,
    pub query_pre: Vec<f32>,
    pub query_position: u32,
    /// Dense post-softmax weights over the visible prefix.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub caches: Vec<KVCacheHead>,
    pub rows: Vec<TrainingRow>,
}

impl Dataset {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Gradients of the mean projector loss over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrad {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub loss: f64,
}

impl ProjectorGrad {
    pub fn norm(&self) -> f64 {
        self.w_q.iter().chain(&self.w_k).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Loss and gradient for one row, accumulated into `gq`/`gk` with weight `w`.
fn row_grad(row: &TrainingRow, cache: &KVCacheHead, p: &Projector, w: f64, gq: &mut [f64], gk: &mut [f64]) -> Result<f64> {
    let d = p.d;
    let visible = cache.visible_len(row.query_position);
    if row.target.len() != visible {
        return Err(arg_err!(
            "target row has {} entries but {} tokens are visible",
            row.target.len(),
            visible
        ));
    }
    let s = p.score_scale;
    let a = p.project_query(&row.query_pre);
    let b: Vec<Vec<f64>> = (0..visible).map(|t| p.project_key(cache.key_pre(t))).collect();
    let scores: Vec<f64> = b.iter().map(|bn| s * a.iter().zip(bn).map(|(x, y)| x * y).sum::<f64>()).collect();
    let loss = projector_loss(&row.target, &scores)?;
    let probs = softmax(&scores)?;
    // u = sum_n e_n k_n with residual e = softmax - target
    let mut u = vec![0.0f64; d];
    for t in 0..visible {
        let e = probs[t] - row.target[t];
        for (ui, k) in u.iter_mut().zip(cache.key_pre(t)) {
            *ui += e * *k as f64;
        }
    }
    let wk_u: Vec<f64> = (0..p.r)
        .map(|i| p.w_k[i * d..(i + 1) * d].iter().zip(&u).map(|(x, y)| x * y).sum())
        .collect();
    for i in 0..p.r {
        for j in 0..d {
            gq[i * d + j] += w * s * wk_u[i] * row.query_pre[j] as f64;
            gk[i * d + j] += w * s * a[i] * u[j];
        }
    }
    Ok(loss)
}

/// Analytic gradient of the mean loss over `rows` (indices into `dataset`).
pub fn projector_grad(dataset: &Dataset, rows: &[usize], projector: &Projector) -> Result<ProjectorGrad> {
    if rows.is_empty() {
        return Err(arg_err!("empty batch"));
    }
    projector.check()?;
    let n = projector.r * projector.d;
    let w = 1.0 / rows.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = rows
        .par_iter()
        .map(|&i| {
            let row = dataset.rows.get(i).ok_or_else(|| arg_err!("row {i} out of range"))?;
            let cache = dataset
                .caches
                .get(row.cache)
                .ok_or_else(|| arg_err!("row {i} references missing cache {}", row.cache))?;
            if row.query_pre.len() != projector.d || cache.head_dim() != projector.d {
                return Err(arg_err!("row {i} dimension disagrees with projector d = {}", projector.d));
            }
            let mut gq = vec![0.0; n];
            let mut gk = vec![0.0; n];
            let loss = row_grad(row, cache, projector, w, &mut gq, &mut gk)?;
            Ok((loss, gq, gk))
        })
        .collect();
    // Sequential reduction keeps the sum order fixed.
    let mut out = ProjectorGrad {
        w_q: vec![0.0; n],
        w_k: vec![0.0; n],
        loss: 0.0,
    };
    for part in parts {
        let (loss, gq, gk) = part?;
        out.loss += w * loss;
        out.w_q.iter_mut().zip(&gq).for_each(|(a, b)| *a += b);
        out.w_k.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Mean loss over `rows` without gradients.
pub fn batch_loss(dataset: &Dataset, rows: &[usize], projector: &Projector) -> Result<f64> {
    let mut total = 0.0;
    for &i in rows {
        let row = &dataset.rows[i];
        let cache = &dataset.caches[row.cache];
        let scores = projected_scores(&row.query_pre, row.query_position, cache, projector)?;
        total += projector_loss(&row.target, &scores)?;
    }
    Ok(total / rows.len() as f64)
}

/// Indices of the `k` largest values; ties toward the lower index.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    order.truncate(k);
    order
}

/// Mean top-`k` recall of the projector against each row's exact top-`k`.
pub fn mean_recall(dataset: &Dataset, projector: &Projector, k: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(arg_err!("recall over an empty dataset"));
    }
    let mut total = 0.0;
    for row in &dataset.rows {
        let cache = &dataset.caches[row.cache];
        let scores = projected_scores(&row.query_pre, row.query_position, cache, projector)?;
        let reference = top_indices(&row.target, k);
        total += index_recall(&top_indices(&scores, k), &reference)?;
    }
    Ok(total / dataset.rows.len() as f64)
}

/// File stem for a persisted projector.
pub fn projector_stem(layer: usize, head: usize, r: usize) -> String {
    format!("proj_l{layer}_h{head}_r{r}")
}

pub fn save_projector(dir: &Path, layer: usize, head: usize, p: &Projector) -> Result<PathBuf> {
    let mut b = TensorBundle::new();
    b.set_meta("kind", &"projector")?;
    b.set_meta("layer", &(layer as i64))?;
    b.set_meta("head", &(head as i64))?;
    b.set_meta("r", &(p.r as i64))?;
    b.set_meta("d", &(p.d as i64))?;
    b.set_meta("score_scale", &p.score_scale)?;
    let to32 = |w: &[f64]| w.iter().map(|x| *x as f32).collect::<Vec<_>>();
    b.insert("w_q", Tensor::f32(vec![p.r, p.d], to32(&p.w_q))?)?;
    b.insert("w_k", Tensor::f32(vec![p.r, p.d], to32(&p.w_k))?)?;
    b.save(dir, &projector_stem(layer, head, p.r))
}

/// Load a projector and its `(layer, head)` key.
pub fn load_projector(manifest: &Path) -> Result<(usize, usize, Projector)> {
    let b = TensorBundle::load(manifest)?;
    if b.get_meta::<String>("kind")? != "projector" {
        return Err(Error::Format(format!("{} is not a projector", manifest.display())));
    }
    let layer = b.get_meta::<i64>("layer")? as usize;
    let head = b.get_meta::<i64>("head")? as usize;
    let r = b.get_meta::<i64>("r")? as usize;
    let d = b.get_meta::<i64>("d")? as usize;
    let to64 = |name: &str| -> Result<Vec<f64>> {
        let t = b.get(name)?;
        if t.shape != [r, d] {
            return Err(Error::Format(format!("{name} has shape {:?}, expected [{r}, {d}]", t.shape)));
        }
        Ok(t.as_f32()?.iter().map(|x| *x as f64).collect())
    };
    Ok((
        layer,
        head,
        Projector {
            r,
            d,
            w_q: to64("w_q")?,
            w_k: to64("w_k")?,
            score_scale: b.get_meta("score_scale")?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cache(d: usize, n: usize, seed: u64) -> KVCacheHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vals: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pos: Vec<u32> = (0..n as u32).collect();
        KVCacheHead::from_rows(RopeParams::with_default_base(d).unwrap(), &keys, &vals, &pos).unwrap()
    }

    #[test]
    fn identity_projection_gives_raw_dots() {
        let cache = random_cache(8, 20, 1);
        let q: Vec<f32> = (0..8).map(|i| i as f32 * 0.1 - 0.3).collect();
        let s = projected_scores(&q, 19, &cache, &Projector::identity(8)).unwrap();
        for t in 0..20 {
            let raw: f64 = q.iter().zip(cache.key_pre(t)).map(|(a, b)| *a as f64 * *b as f64).sum();
            assert!((s[t] - raw).abs() < 1e-12);
        }
        let s = projected_scores(&q, 5, &cache, &Projector::identity(8)).unwrap();
        assert_eq!(s.len(), 6);
    }

    #[test]
    fn null_projection_gives_zero() {
        let cache = random_cache(8, 10, 2);
        let mut p = Projector::gaussian(4, 8, SeedTree::new(1));
        p.w_q.iter_mut().for_each(|w| *w = 0.0);
        let s = projected_scores(&[1.0; 8], 9, &cache, &p).unwrap();
        assert!(s.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn matches_naive_double_loop() {
        let (d, r) = (16, 4);
        let cache = random_cache(d, 32, 3);
        let p = Projector::gaussian(r, d, SeedTree::new(4));
        let q: Vec<f32> = (0..d).map(|i| (i as f32).sin()).collect();
        let s = projected_scores(&q, 31, &cache, &p).unwrap();
        for t in 0..32 {
            let k = cache.key_pre(t);
            let mut acc = 0.0;
            for i in 0..r {
                let mut a = 0.0;
                let mut b = 0.0;
                for j in 0..d {
                    a += p.w_q[i * d + j] * q[j] as f64;
                    b += p.w_k[i * d + j] * k[j] as f64;
                }
                acc += a * b;
            }
            assert!((s[t] - acc).abs() < 1e-6);
        }
        assert!(projected_scores(&q[..8], 31, &cache, &p).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(index_recall(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(index_recall(&[4, 5], &[1, 2]).unwrap(), 0.0);
        assert_eq!(index_recall(&[2, 4, 9], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(index_recall(&[1], &[]).is_err());
    }

    #[test]
    fn loss_examples() {
        let full = softmax(&[0.3, -1.2, 2.0]).unwrap();
        let shifted: Vec<f64> = full.iter().map(|p| p.ln() + 5.0).collect();
        assert!(projector_loss(&full, &shifted).unwrap() < 1e-12);
        assert!(projector_loss(&[0.25; 4], &[3.0; 4]).unwrap() < 1e-12);
        let v = projector_loss(&[0.9, 0.1], &[0.0, 0.0]).unwrap();
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.3681).abs() < 1e-4);
        assert!(projector_loss(&[1.0], &[0.0, 0.0]).is_err());
    }

    fn small_dataset(d: usize, seed: u64) -> Dataset {
        let cache = random_cache(d, 12, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let rows = (0..3)
            .map(|i| {
                let pos = 6 + 2 * i as u32;
                let raw: Vec<f64> = (0..=pos).map(|_| rng.random_range(-2.0..2.0)).collect();
                TrainingRow {
                    cache: 0,
                    query_pre: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    query_position: pos,
                    target: softmax(&raw).unwrap(),
                }
            })
            .collect();
        Dataset { caches: vec![cache], rows }
    }

    #[test]
    fn duplicating_batch_keeps_gradient() {
        let data = small_dataset(8, 5);
        let p = Projector::gaussian(3, 8, SeedTree::new(6));
        let g1 = projector_grad(&data, &[0, 1, 2], &p).unwrap();
        let g2 = projector_grad(&data, &[0, 1, 2, 0, 1, 2], &p).unwrap();
        for (a, b) in g1.w_q.iter().chain(&g1.w_k).zip(g2.w_q.iter().chain(&g2.w_k)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!((g1.loss - g2.loss).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_is_stationary() {
        // Targets generated by the projector itself.
        let mut data = small_dataset(8, 7);
        let p = Projector::gaussian(3, 8, SeedTree::new(8));
        for row in &mut data.rows {
            let s = projected_scores(&row.query_pre, row.query_position, &data.caches[0], &p).unwrap();
            row.target = softmax(&s).unwrap();
        }
        let g = projector_grad(&data, &[0, 1, 2], &p).unwrap();
        assert!(g.loss < 1e-12);
        assert!(g.norm() <= 1e-6);
    }

    #[test]
    fn empty_batch_rejected() {
        let data = small_dataset(8, 9);
        assert!(projector_grad(&data, &[], &Projector::zeros(2, 8)).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Projector::gaussian(4, 16, SeedTree::new(3)).rounded();
        let path = save_projector(dir.path(), 2, 5, &p).unwrap();
        assert!(path.ends_with("proj_l2_h5_r4.toml"));
        let (layer, head, back) = load_projector(&path).unwrap();
        assert_eq!((layer, head), (2, 5));
        assert_eq!(back, p);
    }
}
