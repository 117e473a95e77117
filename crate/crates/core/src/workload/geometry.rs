use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::rope::RopeParams;

/// Layer/head/dimension layout plus the sparse-attention knobs shared by
/// every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGeometry {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Sliding-window length for local heads, in tokens.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_sinks")]
    pub n_sinks: usize,
    #[serde(default = "default_ratio")]
    pub retrieval_ratio: f64,
    /// Projector rank `r`.
    #[serde(default = "default_low_dim")]
    pub low_dim: usize,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_rope_base() -> f64 {
    crate::rope::DEFAULT_BASE
}
fn default_window() -> usize {
    8192
}
fn default_sinks() -> usize {
    4
}
fn default_ratio() -> f64 {
    0.15
}
fn default_low_dim() -> usize {
    16
}
fn default_top_p() -> f64 {
    0.9
}
fn default_block() -> usize {
    64
}

impl ModelGeometry {
    /// Geometry with every knob at its default.
    pub fn new(n_layers: usize, n_q_heads: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        ModelGeometry {
            n_layers,
            n_q_heads,
            n_kv_heads,
            head_dim,
            rope_base: default_rope_base(),
            window: default_window(),
            n_sinks: default_sinks(),
            retrieval_ratio: default_ratio(),
            low_dim: default_low_dim(),
            top_p: default_top_p(),
            block_size: default_block(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return Err(arg_err!("layer and head counts must be positive"));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(arg_err!(
                "n_kv_heads {} does not divide n_q_heads {}",
                self.n_kv_heads,
                self.n_q_heads
            ));
        }
        RopeParams::new(self.head_dim, self.rope_base)?;
        if self.window == 0 {
            return Err(arg_err!("window must be positive"));
        }
        if !(self.retrieval_ratio > 0.0 && self.retrieval_ratio <= 1.0) {
            return Err(arg_err!("retrieval_ratio must lie in (0, 1], got {}", self.retrieval_ratio));
        }
        if self.low_dim == 0 || self.low_dim > self.head_dim {
            return Err(arg_err!(
                "low_dim must lie in 1..={}, got {}",
                self.head_dim,
                self.low_dim
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(arg_err!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.block_size == 0 {
            return Err(arg_err!("block_size must be positive"));
        }
        Ok(())
    }

    pub fn rope(&self) -> Result<RopeParams> {
        RopeParams::new(self.head_dim, self.rope_base)
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// Attention scale `1 / sqrt(head_dim)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub fn total_q_heads(&self) -> usize {
        self.n_layers * self.n_q_heads
    }

    pub fn qhead_to_kvhead(&self, q_head: usize) -> Result<usize> {
        qhead_to_kvhead(self, q_head)
    }
}

/// GQA mapping from a query head to the KV head it reads.
pub fn qhead_to_kvhead(geometry: &ModelGeometry, q_head: usize) -> Result<usize> {
    if q_head >= geometry.n_q_heads {
        return Err(arg_err!(
            "query head {q_head} out of range (n_q_heads = {})",
            geometry.n_q_heads
        ));
    }
    Ok(q_head / geometry.group_size())
}

/// A query head addressed by layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }

    /// Flat index `layer * n_q_heads + head`.
    pub fn flat(&self, geometry: &ModelGeometry) -> usize {
        self.layer * geometry.n_q_heads + self.head
    }

    pub fn from_flat(index: usize, geometry: &ModelGeometry) -> Self {
        HeadId {
            layer: index / geometry.n_q_heads,
            head: index % geometry.n_q_heads,
        }
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}
