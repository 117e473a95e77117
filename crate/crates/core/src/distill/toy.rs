use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::HeadPartition;
use crate::engine::{content_projector, DecodeConfig, SelectorMode, SparseEngine};
use crate::error::{arg_err, Error, Result};
use crate::indexer::AdamW;
use crate::seed::SeedTree;
use crate::workload::{
    dense_attention, gen_synthetic_workload, HeadId, ModelGeometry, NeedleSpan, TopicSpec, Workload, WorkloadSpec,
};

use super::{distill_grad, extract_top10, TeacherCache, TeacherRecord};

/// The toy student: one attention layer over a synthetic workload followed
/// by a linear vocabulary head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab: usize,
    pub seq_len: usize,
    /// Tokens before the first distilled decode position.
    pub prompt_len: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub retrieval_heads: usize,
    pub window: usize,
    /// Scale of the initial head weights, in logit units per unit feature.
    pub logit_gain: f64,
    pub p: f64,
    pub mode: SelectorMode,
    /// Treat every head as a retrieval head (local heads then also see
    /// the full prefix at `p = 1`).
    pub all_retrieval: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab: 256,
            seq_len: 2048,
            prompt_len: 1536,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            retrieval_heads: 2,
            window: 128,
            logit_gain: 4.0,
            p: 0.9,
            mode: SelectorMode::Exact,
            all_retrieval: false,
        }
    }
}

impl ToyConfig {
    fn geometry(&self) -> ModelGeometry {
        let mut g = ModelGeometry::new(1, self.n_q_heads, self.n_kv_heads, self.head_dim);
        g.rope_base = 1e6;
        g.window = self.window;
        g.low_dim = 16;
        g
    }
}

/// Fixed attention features of the dense teacher and the sparse student at
/// every decode position, plus the shared initial head weights.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub config: ToyConfig,
    pub positions: Vec<u32>,
    /// Concatenated head outputs, `positions x features`.
    pub dense: Vec<Vec<f64>>,
    pub sparse: Vec<Vec<f64>>,
    /// Initial head weights, row-major `vocab x features`.
    pub w0: Vec<f64>,
    pub b0: Vec<f64>,
}

impl ToyTask {
    pub fn features(&self) -> usize {
        self.config.n_q_heads * self.config.head_dim
    }

    fn logits(&self, w: &[f64], b: &[f64], f: &[f64]) -> Vec<f64> {
        let nf = self.features();
        (0..self.config.vocab)
            .map(|v| b[v] + w[v * nf..(v + 1) * nf].iter().zip(f).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    }
}

fn workload_for(config: &ToyConfig, g: &ModelGeometry, seed: u64) -> Result<Workload> {
    let mut spec = WorkloadSpec::new(config.seq_len).with_random_retrieval_heads(g, config.retrieval_heads, seed);
    let decode = config.seq_len - config.prompt_len;
    // Needle copies spread over the decode range.
    let len = 16;
    spec.needles = (0..4)
        .filter_map(|i| {
            let dst = config.prompt_len + i * decode / 4;
            let src = g.n_sinks + 8 + i * 2 * len;
            (dst + len <= config.seq_len && src + len < config.prompt_len).then_some(NeedleSpan { src, dst, len })
        })
        .collect();
    spec.topic = Some(TopicSpec::default());
    gen_synthetic_workload(g, &spec, seed)
}

pub fn build_toy_task(config: &ToyConfig, seed: u64) -> Result<ToyTask> {
    if config.vocab < super::TOP_K {
        return Err(arg_err!("vocabulary must hold at least {} entries", super::TOP_K));
    }
    if config.prompt_len == 0 || config.prompt_len >= config.seq_len {
        return Err(arg_err!("prompt_len must lie in 1..seq_len"));
    }
    let g = config.geometry();
    let workload = workload_for(config, &g, seed)?;
    let partition = if config.all_retrieval {
        HeadPartition::all_retrieval(g.total_q_heads())
    } else {
        HeadPartition::from_roles(&workload.roles())
    };
    let decode = DecodeConfig {
        mode: config.mode,
        p: config.p,
        record_true_mass: false,
        ..Default::default()
    };
    let engine = SparseEngine::with_shared_projector(g.clone(), partition, content_projector(&g, 16)?, decode)?;
    let trace = engine.run(&workload, config.prompt_len)?;

    let positions: Vec<u32> = (config.prompt_len as u32..config.seq_len as u32).collect();
    let n_heads = g.total_q_heads();
    let d = g.head_dim;
    let mut sparse = vec![vec![0.0; n_heads * d]; positions.len()];
    for e in &trace.entries {
        let row = (e.position as usize) - config.prompt_len;
        let f = HeadId::new(e.layer, e.head).flat(&g);
        sparse[row][f * d..(f + 1) * d].copy_from_slice(&e.output);
    }
    let caches: Vec<_> = (0..n_heads)
        .map(|f| workload.cache_for(HeadId::from_flat(f, &g), config.seq_len))
        .collect::<Result<_>>()?;
    let dense: Vec<Vec<f64>> = positions
        .par_iter()
        .map(|&t| {
            let mut feat = Vec::with_capacity(n_heads * d);
            for (f, cache) in caches.iter().enumerate() {
                let q = workload.query(HeadId::from_flat(f, &g), t as usize);
                feat.extend(dense_attention(q, t, cache, g.scale())?.output);
            }
            Ok(feat)
        })
        .collect::<Result<_>>()?;

    let nf = n_heads * d;
    let mut rng = SeedTree::new(seed).child("toy-head").rng();
    let std = config.logit_gain / (nf as f64).sqrt();
    let w0 = (0..config.vocab * nf).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    let b0 = (0..config.vocab).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(ToyTask {
        config: config.clone(),
        positions,
        dense,
        sparse,
        w0,
        b0,
    })
}

/// Teacher top-10 logits from the dense features and the initial weights.
pub fn teacher_cache_for(task: &ToyTask) -> Result<TeacherCache> {
    let records = task
        .positions
        .iter()
        .zip(&task.dense)
        .map(|(p, f)| {
            Ok(TeacherRecord {
                position: *p,
                logits: extract_top10(&task.logits(&task.w0, &task.b0, f))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TeacherCache {
        vocab: task.config.vocab,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub rows_per_step: usize,
    pub weight_decay: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 1e-3,
            warmup_steps: 200,
            steps: 600,
            rows_per_step: 32,
            weight_decay: 0.0,
        }
    }
}

impl Stage2Config {
    /// Linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
    /// Mean loss over every position with the initial and the final weights.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Train the student head (`W`, `b`) against cached teacher logits using the
/// sparse features. Deterministic in `seed`.
pub fn toy_self_distill(task: &ToyTask, teacher: &TeacherCache, config: &Stage2Config, seed: SeedTree) -> Result<DistillOutcome> {
    if teacher.is_empty() {
        return Err(arg_err!("teacher cache is empty"));
    }
    if teacher.vocab != task.config.vocab || teacher.len() != task.positions.len() {
        return Err(arg_err!(
            "teacher cache ({} records, vocab {}) does not match the task ({} positions, vocab {})",
            teacher.len(),
            teacher.vocab,
            task.positions.len(),
            task.config.vocab
        ));
    }
    if let Some((r, p)) = teacher.records.iter().zip(&task.positions).find(|(r, p)| r.position != **p) {
        return Err(arg_err!("teacher record at position {} where the task expects {p}", r.position));
    }
    if config.steps == 0 || config.rows_per_step == 0 || !(config.lr >= 0.0) {
        return Err(arg_err!("steps and rows_per_step must be positive and lr non-negative"));
    }
    let nf = task.features();
    let vocab = task.config.vocab;
    let mut params: Vec<f64> = task.w0.iter().chain(&task.b0).copied().collect();
    let mut opt = AdamW::new(params.len(), 0.9, 0.999, 1e-8, config.weight_decay);
    let mut rng = seed.child("batches").rng();
    let n = task.positions.len();

    let mean_loss = |params: &[f64]| -> Result<f64> {
        let (w, b) = params.split_at(vocab * nf);
        let total: f64 = (0..n)
            .into_par_iter()
            .map(|i| super::distill_loss(&teacher.records[i].logits, &task.logits(w, b, &task.sparse[i])))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum();
        Ok(total / n as f64)
    };
    let initial_loss = mean_loss(&params)?;

    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.rows_per_step).map(|_| rng.random_range(0..n)).collect();
        let (w, b) = params.split_at(vocab * nf);
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|&i| distill_grad(&teacher.records[i].logits, &task.logits(w, b, &task.sparse[i])))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (&i, (l, g)) in batch.iter().zip(&parts) {
            loss += l * scale;
            for &v in &teacher.records[i].logits.indices {
                let v = v as usize;
                let gv = g[v] * scale;
                for (gw, f) in grad[v * nf..(v + 1) * nf].iter_mut().zip(&task.sparse[i]) {
                    *gw += gv * f;
                }
                grad[vocab * nf + v] += gv;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("distillation loss diverged at step {step}")));
        }
        losses.push(loss);
        opt.step(&mut params, &grad, config.lr_at(step));
    }
    let final_loss = mean_loss(&params)?;
    Ok(DistillOutcome {
        losses,
        initial_loss,
        final_loss,
    })
}
