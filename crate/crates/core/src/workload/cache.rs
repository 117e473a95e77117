use crate::error::{arg_err, Result};
use crate::rope::RopeParams;

/// Append-only store for one KV head. Keeps pre-RoPE keys for the indexer
/// and rotated keys for exact attention; rows are contiguous `head_dim` slices.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheHead {
    rope: RopeParams,
    keys_pre: Vec<f32>,
    keys_post: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<u32>,
}

impl KVCacheHead {
    pub fn new(rope: RopeParams) -> Self {
        KVCacheHead {
            rope,
            keys_pre: Vec::new(),
            keys_post: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn with_capacity(rope: RopeParams, tokens: usize) -> Self {
        let d = rope.head_dim();
        KVCacheHead {
            rope,
            keys_pre: Vec::with_capacity(tokens * d),
            keys_post: Vec::with_capacity(tokens * d),
            values: Vec::with_capacity(tokens * d),
            positions: Vec::with_capacity(tokens),
        }
    }

    /// Build from flat row-major arrays, rotating every key.
    pub fn from_rows(rope: RopeParams, keys_pre: &[f32], values: &[f32], positions: &[u32]) -> Result<Self> {
        let d = rope.head_dim();
        if keys_pre.len() != positions.len() * d || values.len() != positions.len() * d {
            return Err(arg_err!(
                "cache arrays disagree: {} keys, {} values for {} positions of dim {d}",
                keys_pre.len(),
                values.len(),
                positions.len()
            ));
        }
        let mut cache = KVCacheHead::with_capacity(rope, positions.len());
        for (t, pos) in positions.iter().enumerate() {
            cache.append(&keys_pre[t * d..(t + 1) * d], &values[t * d..(t + 1) * d], *pos)?;
        }
        Ok(cache)
    }

    pub fn append(&mut self, key_pre: &[f32], value: &[f32], position: u32) -> Result<()> {
        let d = self.rope.head_dim();
        if key_pre.len() != d || value.len() != d {
            return Err(arg_err!(
                "append expects vectors of length {d}, got key {} value {}",
                key_pre.len(),
                value.len()
            ));
        }
        if let Some(last) = self.positions.last() {
            if position <= *last {
                return Err(arg_err!(
                    "positions must strictly increase: {position} after {last}"
                ));
            }
        }
        let mut rotated = vec![0.0f64; d];
        self.rope.rotate_into(key_pre, position, &mut rotated);
        self.keys_pre.extend_from_slice(key_pre);
        self.keys_post.extend(rotated.iter().map(|x| *x as f32));
        self.values.extend_from_slice(value);
        self.positions.push(position);
        Ok(())
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    pub fn head_dim(&self) -> usize {
        self.rope.head_dim()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn key_pre(&self, t: usize) -> &[f32] {
        let d = self.head_dim();
        &self.keys_pre[t * d..(t + 1) * d]
    }

    pub fn key_post(&self, t: usize) -> &[f32] {
        let d = self.head_dim();
        &self.keys_post[t * d..(t + 1) * d]
    }

    pub fn value(&self, t: usize) -> &[f32] {
        let d = self.head_dim();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn position(&self, t: usize) -> u32 {
        self.positions[t]
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn keys_pre_flat(&self) -> &[f32] {
        &self.keys_pre
    }

    pub fn values_flat(&self) -> &[f32] {
        &self.values
    }

    /// Number of entries a query at `query_position` may attend to.
    pub fn visible_len(&self, query_position: u32) -> usize {
        self.positions.partition_point(|p| *p <= query_position)
    }

    /// Copy the given rows (indices into this cache, ascending) into a new cache.
    pub fn subset(&self, indices: &[usize]) -> Result<KVCacheHead> {
        let d = self.head_dim();
        let mut out = KVCacheHead::with_capacity(self.rope.clone(), indices.len());
        let mut prev: Option<usize> = None;
        for &t in indices {
            if t >= self.len() || prev.is_some_and(|p| p >= t) {
                return Err(arg_err!("subset indices must be ascending and < {}", self.len()));
            }
            prev = Some(t);
            out.keys_pre.extend_from_slice(self.key_pre(t));
            out.keys_post.extend_from_slice(self.key_post(t));
            out.values.extend_from_slice(self.value(t));
            out.positions.push(self.positions[t]);
        }
        debug_assert_eq!(out.keys_post.len(), indices.len() * d);
        Ok(out)
    }

    /// Recompute every rotated key and compare bit-for-bit.
    pub fn check_rotation_invariant(&self) -> bool {
        let d = self.head_dim();
        let mut rotated = vec![0.0f64; d];
        (0..self.len()).all(|t| {
            self.rope.rotate_into(self.key_pre(t), self.positions[t], &mut rotated);
            rotated
                .iter()
                .zip(self.key_post(t))
                .all(|(a, b)| (*a as f32).to_bits() == b.to_bits())
        })
    }
}
