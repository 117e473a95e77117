//! Geometry, KV caches, the dense causal-attention oracle and synthetic
//! workloads standing in for real model activations.

mod cache;
mod dense;
mod generator;
mod geometry;
mod persist;

pub use cache::KVCacheHead;
pub use dense::{dense_attention, AttentionRow};
pub(crate) use dense::{exact_scores, rotate_query, weighted_values};
pub use generator::{
    background_content, gen_synthetic_workload, needle_content, synthesize_heads, Annotations,
    HeadActivations, HeadRole, HeadRoleEntry, NeedleAnnotation, NeedleSpan, Probe,
    ProbeAnnotation, ProbeKind, SignalParams, SyntheticModel, TokenEmbeddings, TopicSpec, Workload, WorkloadSpec,
};
pub use geometry::{qhead_to_kvhead, HeadId, ModelGeometry};
pub use persist::{load_workload, save_workload};
