use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::softmax;
use crate::rope::RopeParams;
use crate::seed::SeedTree;
use crate::workload::{dense_attention, HeadId, KVCacheHead, Workload};

use super::{Dataset, TrainingRow};

/// Synthetic teacher whose attention logits are a low-rank bilinear form of
/// Gaussian queries and keys.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedTeacherConfig {
    pub head_dim: usize,
    pub rank: usize,
    pub seq_len: usize,
    pub n_sequences: usize,
    pub queries_per_sequence: usize,
    /// Queries are placed at positions `>= min_query_position`.
    pub min_query_position: usize,
    pub temperature: f64,
}

impl Default for PlantedTeacherConfig {
    fn default() -> Self {
        PlantedTeacherConfig {
            head_dim: 64,
            rank: 8,
            seq_len: 1024,
            n_sequences: 4,
            queries_per_sequence: 64,
            min_query_position: 256,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTeacher {
    pub rank: usize,
    pub head_dim: usize,
    pub a_q: Vec<f64>,
    pub a_k: Vec<f64>,
    pub temperature: f64,
}

impl PlantedTeacher {
    pub fn new(config: &PlantedTeacherConfig, seed: SeedTree) -> Self {
        let (r, d) = (config.rank, config.head_dim);
        let mut rng = seed.rng();
        let std = 1.0 / (d as f64).sqrt();
        let mut draw = || (0..r * d).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect::<Vec<_>>();
        let a_q = draw();
        let a_k = draw();
        PlantedTeacher {
            rank: r,
            head_dim: d,
            a_q,
            a_k,
            temperature: config.temperature,
        }
    }

    fn project(&self, w: &[f64], x: &[f32]) -> Vec<f64> {
        let d = self.head_dim;
        (0..self.rank)
            .map(|i| w[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * *b as f64).sum())
            .collect()
    }

    pub fn logit(&self, q: &[f32], k: &[f32]) -> f64 {
        let a = self.project(&self.a_q, q);
        let b = self.project(&self.a_k, k);
        self.temperature * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
    }
}

/// Draw a dataset whose targets are the teacher's causal attention rows.
/// The same teacher seed with different `data_seed`s yields train and
/// held-out splits of one task.
pub fn planted_bilinear_dataset(
    config: &PlantedTeacherConfig,
    teacher: &PlantedTeacher,
    data_seed: SeedTree,
) -> Result<Dataset> {
    let d = config.head_dim;
    if teacher.head_dim != d {
        return Err(arg_err!("teacher dimension {} differs from config {d}", teacher.head_dim));
    }
    if config.min_query_position >= config.seq_len {
        return Err(arg_err!(
            "min_query_position {} must be below seq_len {}",
            config.min_query_position,
            config.seq_len
        ));
    }
    let rope = RopeParams::with_default_base(d)?;
    let mut data = Dataset::default();
    for s in 0..config.n_sequences {
        let mut rng = data_seed.index(s as u64).rng();
        let mut gauss = |n: usize| (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect::<Vec<f32>>();
        let keys = gauss(config.seq_len * d);
        let values = gauss(config.seq_len * d);
        let positions: Vec<u32> = (0..config.seq_len as u32).collect();
        let cache = KVCacheHead::from_rows(rope.clone(), &keys, &values, &positions)?;
        let mut prng = data_seed.index(s as u64).child("positions").rng();
        for _ in 0..config.queries_per_sequence {
            let q = gauss(d);
            let pos = prng.random_range(config.min_query_position..config.seq_len);
            let logits: Vec<f64> = (0..=pos).map(|t| teacher.logit(&q, cache.key_pre(t))).collect();
            data.rows.push(TrainingRow {
                cache: s,
                query_pre: q,
                query_position: pos as u32,
                target: softmax(&logits)?,
            });
        }
        data.caches.push(cache);
    }
    Ok(data)
}

/// Training rows for one query head of a workload: exact attention rows at
/// uniformly drawn positions `>= min_position`.
pub fn rows_from_workload(
    workload: &Workload,
    head: HeadId,
    n_rows: usize,
    min_position: usize,
    seed: SeedTree,
) -> Result<Dataset> {
    let n = workload.seq_len();
    if min_position >= n {
        return Err(arg_err!("min_position {min_position} must be below sequence length {n}"));
    }
    let cache = workload.cache_for(head, n)?;
    let scale = workload.geometry.scale();
    let mut rng = seed.rng();
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let pos = rng.random_range(min_position..n);
        let q = workload.query(head, pos);
        let row = dense_attention(q, pos as u32, &cache, scale)?;
        rows.push(TrainingRow {
            cache: 0,
            query_pre: q.to_vec(),
            query_position: pos as u32,
            target: row.weights,
        });
    }
    Ok(Dataset {
        caches: vec![cache],
        rows,
    })
}
