//! Deterministic synthetic activations with planted head behaviour.
//!
//! Every token carries a content embedding. Content lives in the
//! lowest-frequency rotary pairs, where rotation barely moves it across the
//! sequence, so pre-RoPE similarity survives into post-RoPE scores:
//!
//! * retrieval heads query with the current token's content (plus a pull
//!   towards the attention sinks), so a repeated span attends to its earlier
//!   copy;
//! * local heads query with a constant "beacon" in the highest-frequency
//!   pairs; summed over pairs, `cos(theta_i * delta)` peaks at `delta = 0`
//!   and decays with distance, which yields recency attention.
//!
//! Query vectors are scaled by `sqrt(head_dim)` so that gains are expressed
//! directly in logit units after the `1/sqrt(head_dim)` attention scale.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::seed::SeedTree;

use super::cache::KVCacheHead;
use super::geometry::{qhead_to_kvhead, HeadId, ModelGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadRole {
    Retrieval,
    Local,
}

/// Magnitudes of the planted structure. Gains are in logit units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalParams {
    /// Dimensions (lowest-frequency pairs) carrying token content. Even.
    pub content_dim: usize,
    /// Norm of background token content; needle content has unit norm.
    pub background_scale: f64,
    pub retrieval_gain: f64,
    pub sink_gain: f64,
    /// Highest-frequency pairs carrying the local-head beacon.
    pub local_pairs: usize,
    /// Per-pair logit of the beacon at zero offset.
    pub local_gain: f64,
    /// Isotropic noise added to every key and (scaled) query coordinate.
    pub noise: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        SignalParams {
            content_dim: 16,
            background_scale: 0.3,
            retrieval_gain: 18.0,
            sink_gain: 12.0,
            local_pairs: 16,
            local_gain: 1.5,
            noise: 0.02,
        }
    }
}

/// Tokens `[dst, dst + len)` repeat the content of `[src, src + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleSpan {
    pub src: usize,
    pub dst: usize,
    pub len: usize,
}

/// A group of background tokens sharing one topic direction; diffuse probes
/// query that direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopicSpec {
    pub fraction: f64,
    pub strength: f64,
}

impl Default for TopicSpec {
    fn default() -> Self {
        TopicSpec {
            fraction: 0.05,
            strength: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Position inside a needle copy; its retrieval query finds one token.
    Concentrated,
    /// Retrieval query replaced by the topic direction.
    Diffuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub position: usize,
    pub kind: ProbeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub seq_len: usize,
    #[serde(default)]
    pub needles: Vec<NeedleSpan>,
    #[serde(default)]
    pub retrieval_heads: Vec<HeadId>,
    #[serde(default)]
    pub probes: Vec<Probe>,
    #[serde(default)]
    pub topic: Option<TopicSpec>,
    #[serde(default)]
    pub signal: SignalParams,
}

impl WorkloadSpec {
    pub fn new(seq_len: usize) -> Self {
        WorkloadSpec {
            seq_len,
            needles: Vec::new(),
            retrieval_heads: Vec::new(),
            probes: Vec::new(),
            topic: None,
            signal: SignalParams::default(),
        }
    }

    /// Plant `count` retrieval heads chosen uniformly without replacement.
    pub fn with_random_retrieval_heads(mut self, geometry: &ModelGeometry, count: usize, seed: u64) -> Self {
        let mut rng = SeedTree::new(seed).child("planted-heads").rng();
        let total = geometry.total_q_heads();
        let picks = rand::seq::index::sample(&mut rng, total, count.min(total));
        let mut heads: Vec<HeadId> = picks.iter().map(|i| HeadId::from_flat(i, geometry)).collect();
        heads.sort();
        self.retrieval_heads = heads;
        self
    }

    /// Number of heads planted at the geometry's retrieval ratio.
    pub fn planted_count(geometry: &ModelGeometry) -> usize {
        crate::calibration::retrieval_count(geometry.total_q_heads(), geometry.retrieval_ratio)
    }

    fn validate(&self, geometry: &ModelGeometry) -> Result<()> {
        geometry.validate()?;
        if self.seq_len == 0 {
            return Err(arg_err!("seq_len must be positive"));
        }
        if self.seq_len > u32::MAX as usize {
            return Err(arg_err!("seq_len exceeds the position range"));
        }
        let s = &self.signal;
        if s.content_dim == 0 || s.content_dim % 2 != 0 || s.content_dim > geometry.head_dim {
            return Err(arg_err!(
                "content_dim must be even and within head_dim, got {}",
                s.content_dim
            ));
        }
        let mut covered = BTreeSet::new();
        for n in &self.needles {
            if n.len == 0 {
                return Err(arg_err!("needle span of length 0"));
            }
            if n.src + n.len > n.dst {
                return Err(arg_err!("needle source {}..{} overlaps its copy at {}", n.src, n.src + n.len, n.dst));
            }
            if n.dst + n.len > self.seq_len {
                return Err(arg_err!("needle copy {}..{} exceeds sequence length {}", n.dst, n.dst + n.len, self.seq_len));
            }
            for t in (n.src..n.src + n.len).chain(n.dst..n.dst + n.len) {
                if !covered.insert(t) {
                    return Err(arg_err!("needle spans overlap at token {t}"));
                }
            }
        }
        for h in &self.retrieval_heads {
            if h.layer >= geometry.n_layers || h.head >= geometry.n_q_heads {
                return Err(arg_err!("planted head {h} outside the geometry"));
            }
        }
        for p in &self.probes {
            if p.position >= self.seq_len {
                return Err(arg_err!("probe at {} beyond sequence length", p.position));
            }
            match p.kind {
                ProbeKind::Concentrated => {
                    if !self.needles.iter().any(|n| (n.dst..n.dst + n.len).contains(&p.position)) {
                        return Err(arg_err!("concentrated probe at {} is not inside a needle copy", p.position));
                    }
                }
                ProbeKind::Diffuse => {
                    if self.topic.is_none() {
                        return Err(arg_err!("diffuse probe requires a topic"));
                    }
                }
            }
        }
        if let Some(t) = &self.topic {
            if !(0.0..=1.0).contains(&t.fraction) {
                return Err(arg_err!("topic fraction must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Row-major `len x dim` token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TokenEmbeddings {
    pub fn new(dim: usize) -> Self {
        TokenEmbeddings { dim, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn extend(&mut self, other: &TokenEmbeddings) {
        debug_assert_eq!(other.dim, self.dim);
        self.data.extend_from_slice(&other.data);
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

/// Background content: isotropic Gaussian with expected norm `scale`.
pub fn background_content(len: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> TokenEmbeddings {
    let s = scale / (dim as f64).sqrt();
    TokenEmbeddings {
        dim,
        data: (0..len * dim).map(|_| (gaussian(rng) * s) as f32).collect(),
    }
}

/// Distinctive content: unit-norm rows.
pub fn needle_content(len: usize, dim: usize, rng: &mut ChaCha8Rng) -> TokenEmbeddings {
    let mut out = TokenEmbeddings::new(dim);
    for _ in 0..len {
        out.push(&unit_vector(rng, dim));
    }
    out
}

/// Per-q-head query streams and per-kv-head key/value streams.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadActivations {
    pub seq_len: usize,
    pub head_dim: usize,
    /// Indexed by flat q-head `layer * n_q_heads + head`; each `seq_len x head_dim`.
    pub queries: Vec<Vec<f32>>,
    /// Indexed by `layer * n_kv_heads + kv`.
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

fn mix(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Turn key/query content streams into per-head activations.
///
/// The first `geometry.n_sinks` positions additionally carry a per-KV-head
/// sink direction that every retrieval query is drawn towards.
pub fn synthesize_heads(
    key_content: &TokenEmbeddings,
    query_content: &TokenEmbeddings,
    geometry: &ModelGeometry,
    roles: &[HeadRole],
    signal: &SignalParams,
    seed: SeedTree,
) -> Result<HeadActivations> {
    let d = geometry.head_dim;
    let cd = signal.content_dim;
    if key_content.dim != cd || query_content.dim != cd || key_content.len() != query_content.len() {
        return Err(arg_err!("content streams must share length and have dim {cd}"));
    }
    if roles.len() != geometry.total_q_heads() {
        return Err(arg_err!("expected {} head roles, got {}", geometry.total_q_heads(), roles.len()));
    }
    if cd > d {
        return Err(arg_err!("content_dim {cd} exceeds head_dim {d}"));
    }
    let n = key_content.len();
    let content_off = d - cd;
    let beacon_pairs = signal.local_pairs.min(content_off / 2);
    let sqrt_d = (d as f64).sqrt();

    let n_kv_total = geometry.n_layers * geometry.n_kv_heads;
    let mut keys = Vec::with_capacity(n_kv_total);
    let mut values = Vec::with_capacity(n_kv_total);
    let mut mixers = Vec::with_capacity(n_kv_total);
    let mut sinks = Vec::with_capacity(n_kv_total);
    for kv in 0..n_kv_total {
        let mut rng = seed.child("kv").index(kv as u64).rng();
        let mixer = random_orthogonal(&mut rng, cd);
        let sink: Vec<f64> = unit_vector(&mut rng, cd).iter().map(|x| *x as f64).collect();
        let mut k = vec![0.0f32; n * d];
        let mut v = vec![0.0f32; n * d];
        for t in 0..n {
            let row = &mut k[t * d..(t + 1) * d];
            for x in row.iter_mut() {
                *x = (gaussian(&mut rng) * signal.noise) as f32;
            }
            for p in 0..beacon_pairs {
                row[2 * p] += 1.0;
            }
            let mut c: Vec<f64> = key_content.row(t).iter().map(|x| *x as f64).collect();
            if t < geometry.n_sinks {
                for (x, s) in c.iter_mut().zip(&sink) {
                    *x += s;
                }
            }
            for (x, m) in row[content_off..].iter_mut().zip(mix(&mixer, &c)) {
                *x += m as f32;
            }
            for x in v[t * d..(t + 1) * d].iter_mut() {
                *x = gaussian(&mut rng) as f32;
            }
        }
        keys.push(k);
        values.push(v);
        mixers.push(mixer);
        sinks.push(sink);
    }

    let mut queries = Vec::with_capacity(roles.len());
    for (flat, role) in roles.iter().enumerate() {
        let head = HeadId::from_flat(flat, geometry);
        let kv = head.layer * geometry.n_kv_heads + qhead_to_kvhead(geometry, head.head)?;
        let mut rng = seed.child("q").index(flat as u64).rng();
        let mut q = vec![0.0f32; n * d];
        for t in 0..n {
            let row = &mut q[t * d..(t + 1) * d];
            for x in row.iter_mut() {
                *x = (gaussian(&mut rng) * signal.noise * sqrt_d) as f32;
            }
            match role {
                HeadRole::Local => {
                    for p in 0..beacon_pairs {
                        row[2 * p] += (signal.local_gain * sqrt_d) as f32;
                    }
                }
                HeadRole::Retrieval => {
                    let c: Vec<f64> = query_content
                        .row(t)
                        .iter()
                        .zip(&sinks[kv])
                        .map(|(x, s)| signal.retrieval_gain * *x as f64 + signal.sink_gain * s)
                        .collect();
                    for (x, m) in row[content_off..].iter_mut().zip(mix(&mixers[kv], &c)) {
                        *x += (m * sqrt_d) as f32;
                    }
                }
            }
        }
        queries.push(q);
    }

    Ok(HeadActivations {
        seq_len: n,
        head_dim: d,
        queries,
        keys,
        values,
    })
}

/// The fixed per-head parameters of a synthetic model. Feeding different
/// token streams through the same model (a workload, a calibration sequence)
/// yields consistent head behaviour.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub geometry: ModelGeometry,
    /// Planted role per flat query head.
    pub roles: Vec<HeadRole>,
    pub signal: SignalParams,
    seed: SeedTree,
}

impl SyntheticModel {
    pub fn from_spec(geometry: &ModelGeometry, spec: &WorkloadSpec, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let planted: BTreeSet<HeadId> = spec.retrieval_heads.iter().copied().collect();
        let roles = (0..geometry.total_q_heads())
            .map(|f| {
                if planted.contains(&HeadId::from_flat(f, geometry)) {
                    HeadRole::Retrieval
                } else {
                    HeadRole::Local
                }
            })
            .collect();
        Ok(SyntheticModel {
            geometry: geometry.clone(),
            roles,
            signal: spec.signal.clone(),
            seed: SeedTree::new(seed).child("heads"),
        })
    }

    pub fn run(&self, key_content: &TokenEmbeddings, query_content: &TokenEmbeddings) -> Result<HeadActivations> {
        synthesize_heads(key_content, query_content, &self.geometry, &self.roles, &self.signal, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadRoleEntry {
    pub layer: usize,
    pub head: usize,
    pub role: HeadRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleAnnotation {
    pub n_pre: Vec<usize>,
    pub n_post: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeAnnotation {
    pub position: usize,
    pub kind: ProbeKind,
    /// Number of tokens the planted structure intends the query to find.
    pub intended_support: usize,
}

/// Ground truth recorded while generating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    pub head_roles: Vec<HeadRoleEntry>,
    pub needles: Vec<NeedleAnnotation>,
    pub sink_positions: Vec<usize>,
    pub topic_tokens: Vec<usize>,
    pub probes: Vec<ProbeAnnotation>,
}

/// A generated workload: geometry, the spec and seed that produced it,
/// annotations and the activations themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub geometry: ModelGeometry,
    pub spec: WorkloadSpec,
    pub seed: u64,
    pub annotations: Annotations,
    pub activations: HeadActivations,
}

impl Workload {
    pub fn seq_len(&self) -> usize {
        self.activations.seq_len
    }

    pub fn role(&self, head: HeadId) -> HeadRole {
        self.annotations.head_roles[head.flat(&self.geometry)].role
    }

    pub fn roles(&self) -> Vec<HeadRole> {
        self.annotations.head_roles.iter().map(|e| e.role).collect()
    }

    pub fn query(&self, head: HeadId, t: usize) -> &[f32] {
        let d = self.activations.head_dim;
        &self.activations.queries[head.flat(&self.geometry)][t * d..(t + 1) * d]
    }

    fn kv_flat(&self, layer: usize, kv: usize) -> usize {
        layer * self.geometry.n_kv_heads + kv
    }

    pub fn key(&self, layer: usize, kv: usize, t: usize) -> &[f32] {
        let d = self.activations.head_dim;
        &self.activations.keys[self.kv_flat(layer, kv)][t * d..(t + 1) * d]
    }

    pub fn value(&self, layer: usize, kv: usize, t: usize) -> &[f32] {
        let d = self.activations.head_dim;
        &self.activations.values[self.kv_flat(layer, kv)][t * d..(t + 1) * d]
    }

    /// Cache holding tokens `0..upto` of one KV head at positions `0..upto`.
    pub fn build_cache(&self, layer: usize, kv: usize, upto: usize) -> Result<KVCacheHead> {
        let d = self.activations.head_dim;
        let f = self.kv_flat(layer, kv);
        let positions: Vec<u32> = (0..upto as u32).collect();
        KVCacheHead::from_rows(
            self.geometry.rope()?,
            &self.activations.keys[f][..upto * d],
            &self.activations.values[f][..upto * d],
            &positions,
        )
    }

    /// Cache for the KV head read by query head `head`.
    pub fn cache_for(&self, head: HeadId, upto: usize) -> Result<KVCacheHead> {
        self.build_cache(head.layer, qhead_to_kvhead(&self.geometry, head.head)?, upto)
    }
}

/// Generate a workload. Deterministic in `(geometry, spec, seed)`.
pub fn gen_synthetic_workload(geometry: &ModelGeometry, spec: &WorkloadSpec, seed: u64) -> Result<Workload> {
    spec.validate(geometry)?;
    let tree = SeedTree::new(seed);
    let signal = &spec.signal;
    let cd = signal.content_dim;
    let n = spec.seq_len;
    let mut rng = tree.child("content").rng();

    let mut keys = background_content(n, cd, signal.background_scale, &mut rng);

    let mut topic_tokens = Vec::new();
    let mut topic_dir = None;
    if let Some(topic) = &spec.topic {
        let dir = unit_vector(&mut rng, cd);
        let in_needle = |t: usize| {
            spec.needles
                .iter()
                .any(|nd| (nd.src..nd.src + nd.len).contains(&t) || (nd.dst..nd.dst + nd.len).contains(&t))
        };
        for t in geometry.n_sinks..n {
            if in_needle(t) {
                continue;
            }
            if rng.random::<f64>() < topic.fraction {
                let w = topic.strength * rng.random_range(0.9..1.0);
                for (x, u) in keys.row_mut(t).iter_mut().zip(&dir) {
                    *x += (w * *u as f64) as f32;
                }
                topic_tokens.push(t);
            }
        }
        topic_dir = Some(dir);
    }

    let mut needles = Vec::new();
    for nd in &spec.needles {
        let mut content = needle_content(nd.len, cd, &mut rng);
        if let Some(dir) = &topic_dir {
            // Needles are off-topic: remove the topic component and renormalise.
            for i in 0..nd.len {
                let row = content.row_mut(i);
                let d: f32 = row.iter().zip(dir).map(|(a, b)| a * b).sum();
                for (x, u) in row.iter_mut().zip(dir) {
                    *x -= d * u;
                }
                let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        for i in 0..nd.len {
            keys.row_mut(nd.src + i).copy_from_slice(content.row(i));
            keys.row_mut(nd.dst + i).copy_from_slice(content.row(i));
        }
        needles.push(NeedleAnnotation {
            n_pre: (nd.src..nd.src + nd.len).collect(),
            n_post: (nd.dst..nd.dst + nd.len).collect(),
        });
    }

    let mut queries = keys.clone();
    let mut probes = Vec::new();
    for p in &spec.probes {
        let intended_support = match p.kind {
            ProbeKind::Concentrated => 1,
            ProbeKind::Diffuse => {
                let dir = topic_dir.as_ref().expect("validated: diffuse probe has a topic");
                queries.row_mut(p.position).copy_from_slice(dir);
                topic_tokens.iter().filter(|t| **t <= p.position).count()
            }
        };
        probes.push(ProbeAnnotation {
            position: p.position,
            kind: p.kind,
            intended_support,
        });
    }

    let model = SyntheticModel::from_spec(geometry, spec, seed)?;
    let head_roles: Vec<HeadRoleEntry> = model
        .roles
        .iter()
        .enumerate()
        .map(|(f, role)| {
            let h = HeadId::from_flat(f, geometry);
            HeadRoleEntry {
                layer: h.layer,
                head: h.head,
                role: *role,
            }
        })
        .collect();
    let activations = model.run(&keys, &queries)?;

    Ok(Workload {
        geometry: geometry.clone(),
        spec: spec.clone(),
        seed,
        annotations: Annotations {
            head_roles,
            needles,
            sink_positions: (0..geometry.n_sinks.min(n)).collect(),
            topic_tokens,
            probes,
        },
        activations,
    })
}
